use super::{attend, AttnConfig, Attended, ConvFfn, MhsaWeights};
use crate::error::Result;
use crate::layers::{GroupNorm, ParamBuilder};
use crate::tensor::{Float, Tensor};

/// Linear map that reduces `n = H·W` key/value tokens to `l = h·w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowRankProjector {
    Identity,
    /// Bilinear resampling of the key/value maps to `(h, w)` (half-pixel centres).
    Bilinear { h: usize, w: usize },
}

fn interp_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let ratio = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[i * src + i0] += 1.0 - frac;
        m[i * src + i1] += frac;
    }
    m
}

/// `[h·w, H·W]` bilinear resampling matrix.
pub fn bilinear_matrix<T: Float>(src: (usize, usize), dst: (usize, usize)) -> Tensor<T> {
    let ph = interp_weights(src.0, dst.0);
    let pw = interp_weights(src.1, dst.1);
    let (n, l) = (src.0 * src.1, dst.0 * dst.1);
    let mut out = vec![T::zero(); l * n];
    for i in 0..dst.0 {
        for j in 0..dst.1 {
            for y in 0..src.0 {
                let wy = ph[i * src.0 + y];
                if wy == 0.0 {
                    continue;
                }
                for x in 0..src.1 {
                    out[(i * dst.1 + j) * n + y * src.1 + x] = T::of(wy * pw[j * src.1 + x]);
                }
            }
        }
    }
    Tensor::from_vec(&[l, n], out).expect("positive extents")
}

impl LowRankProjector {
    pub fn reduced_len(&self, spatial: (usize, usize)) -> usize {
        match *self {
            LowRankProjector::Identity => spatial.0 * spatial.1,
            LowRankProjector::Bilinear { h, w } => h * w,
        }
    }

    /// `[d, H·W] -> [d, l]`.
    pub fn apply<T: Float>(&self, seq: &Tensor<T>, spatial: (usize, usize)) -> Result<Tensor<T>> {
        match *self {
            LowRankProjector::Identity => Ok(seq.clone()),
            LowRankProjector::Bilinear { h, w } => seq.matmul_nt(&bilinear_matrix(spatial, (h, w))),
        }
    }
}

/// `softmax(Q K̄ᵀ / sqrt(d_h)) V̄` with low-rank keys and values; `[d, H, W]`
/// in and out (before the output projection).
pub fn efficient_attention<T: Float>(
    x: &Tensor<T>,
    w: &MhsaWeights<T>,
    projector: LowRankProjector,
    cfg: &AttnConfig,
) -> Result<Tensor<T>> {
    efficient_attention_full(x, w, projector, cfg)?.out.reshape(x.shape())
}

pub(crate) fn efficient_attention_full<T: Float>(
    x: &Tensor<T>,
    w: &MhsaWeights<T>,
    projector: LowRankProjector,
    cfg: &AttnConfig,
) -> Result<Attended<T>> {
    cfg.validate()?;
    let spatial = (x.shape()[1], x.shape()[2]);
    let q = w.q.project_cf(x)?;
    let k = projector.apply(&w.k.project_cf(x)?, spatial)?;
    let v = projector.apply(&w.v.project_cf(x)?, spatial)?;
    attend(&q, &k, &v, cfg.n_heads, None)
}

/// Pre-norm Transformer block using linear low-rank attention; the baseline
/// the bidirectional block is compared against.
#[derive(Clone, Debug)]
pub struct LowRankBlock<T: Float> {
    pub norm1: GroupNorm<T>,
    pub attn: MhsaWeights<T>,
    pub norm2: GroupNorm<T>,
    pub ffn: ConvFfn<T>,
    pub projector: LowRankProjector,
    pub cfg: AttnConfig,
}

impl<T: Float> LowRankBlock<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, cfg: &AttnConfig) -> Self {
        LowRankBlock {
            norm1: GroupNorm::new(&mut pb.sub("norm1"), cfg.d),
            attn: MhsaWeights::new(&mut pb.sub("attn"), cfg, true),
            norm2: GroupNorm::new(&mut pb.sub("norm2"), cfg.d),
            ffn: ConvFfn::new(&mut pb.sub("ffn"), cfg.d, cfg.k),
            projector: LowRankProjector::Bilinear {
                h: cfg.semantic_hw.0,
                w: cfg.semantic_hw.1,
            },
            cfg: cfg.clone(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = efficient_attention(&self.norm1.forward(x)?, &self.attn, self.projector, &self.cfg)?;
        let x = x.add(&self.attn.out.forward(&a)?)?;
        x.add(&self.ffn.forward(&self.norm2.forward(&x)?)?)
    }
}
