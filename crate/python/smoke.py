"""Smoke test for the medformer_py extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/medformer_py-*.whl
"""

import math
import struct
import sys
import tempfile
from pathlib import Path

import medformer_py as mf


def parse_mft_header(raw: bytes):
    """Reads the MFT header by hand: magic, dtype code, rank, u64 extents."""
    assert raw[:4] == b"MFT1", raw[:4]
    dtype, rank = raw[4], raw[5]
    shape = struct.unpack_from(f"<{rank}Q", raw, 6)
    return dtype, list(shape), 6 + 8 * rank


def main() -> int:
    assert mf.formula_macs("conv", 4, 4, 2, 3, 0, 4) == 576
    assert mf.formula_macs("mhsa", 4, 4, 2, 3, 0, 4) == 1280
    assert mf.formula_macs("bmha", 4, 4, 2, 3, 0, 4) == 576
    assert mf.measured_macs("conv", 8, 8) > 0

    pred = [0, 1, 1, 0]
    assert mf.dsc(pred, pred, 2, 2, 1) == 1.0
    assert mf.hd95(pred, pred, 2, 2, 1) == 0.0
    assert math.isinf(mf.hd95([0] * 4, pred, 2, 2, 1))

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        values = [0.5 * i - 1.0 for i in range(12)]
        mf.write_mft(tmp / "t.mft", [3, 4], values, "f64")
        dtype, shape, back = mf.read_mft(tmp / "t.mft")
        assert (dtype, shape, back) == ("f64", [3, 4], values)
        code, hdr_shape, offset = parse_mft_header((tmp / "t.mft").read_bytes())
        assert (code, hdr_shape) == (1, [3, 4])
        assert struct.unpack_from("<d", (tmp / "t.mft").read_bytes(), offset)[0] == values[0]

        n = mf.synth_dataset(tmp / "ds", 6, 2, size=32, seed=1)
        assert n == 8
        cfg = "epochs=1\naugment=false\nbase_width=4\nwidths=4,8,8\nheads=2,2,2\nsemantic_hw=2,2\nfusion_width=4\nfusion_blocks=1\nfusion_heads=2\n"
        history = mf.train_run(cfg, tmp / "ds", tmp / "run")
        assert len(history) == 1 and 0.0 <= history[0]["val_dsc"] <= 1.0, history

        records = mf.evaluate(tmp / "run" / "checkpoints" / "best.ckpt", tmp / "ds")
        assert [r[0] for r in records] == ["case0006", "case0007"], records
        again = mf.evaluate(tmp / "run" / "checkpoints" / "best.ckpt", tmp / "ds")
        assert records == again

        model = mf.Model.load(tmp / "run" / "checkpoints" / "best.ckpt")
        assert "norm_mean" in model.meta()
        shape, logits = model.forward([0.0] * 32 * 32, (1, 32, 32))
        assert shape == [2, 32, 32] and len(logits) == 2 * 32 * 32
        labels = model.predict([0.0] * 32 * 32, (1, 32, 32), window=(16, 16))
        assert len(labels) == 32 * 32 and set(labels) <= {0, 1}

        fresh = mf.Model("semantic_hw=2,2", seed=3)
        assert fresh.parameter_count() > 0
        fresh.save(tmp / "fresh.ckpt")
        assert mf.Model.load(tmp / "fresh.ckpt").config() == fresh.config()

        try:
            mf.Model("no_such_key=1")
        except ValueError as e:
            assert "no_such_key" in str(e)
        else:
            raise AssertionError("unknown key accepted")

    print("python smoke: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
