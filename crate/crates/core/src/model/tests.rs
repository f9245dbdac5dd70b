use super::*;
use crate::tensor::gradcheck::{grad_check, GradCheckOpts};
use rand::Rng;

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// Closed-form parameter count, written from the layer list rather than the code.
fn expected_count(c: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let dw = |d: usize, k: usize| d * k * k + d;
    let gn = |d: usize| 2 * d;
    let res = |d: usize| 2 * gn(d) + 2 * conv(d, d, 3);
    let k = c.kernel;
    let bmha = |d: usize, update: bool| {
        let shared = 3 * gn(d) + (dw(d, k) + conv(d, d, 1)) + 2 * conv(d, d, 1) + conv(d, d, 1) + dw(d, k) + conv(d, d, 1);
        let m_side = gn(d) + (dw(d, k) + conv(d, d, 1)) + conv(d, d, 1) + dw(d, 1) + conv(d, d, 1);
        shared + if update { m_side } else { 0 }
    };
    let [d1, d2, d3] = c.widths;
    let d0 = c.base_width;
    let l = c.semantic_hw.0 * c.semantic_hw.1;
    let stem = conv(c.in_channels, d0, 3) + 4 * res(d0) + conv(d0, d0, 2) + conv(d0, d1, 2);
    let enc: usize = (0..3).map(|i| conv(c.widths[i], l, 3) + conv(c.widths[i], c.widths[i], 3) + c.blocks[i] * bmha(c.widths[i], true)).sum();
    let merges = conv(4 * d1, d2, 1) + conv(4 * d2, d3, 1);
    let f = c.fusion_width;
    let fusion = c.widths.iter().map(|&d| conv(d, f, 1) + conv(f, d, 1)).sum::<usize>()
        + c.fusion_blocks * (2 * gn(f) + 4 * conv(f, f, 1) + conv(f, 4 * f, 1) + conv(4 * f, f, 1));
    let dec = bmha(d3, false)
        + conv(d3, d2, 3)
        + conv(2 * d2, d2, 1)
        + (c.blocks[1] - 1) * bmha(d2, true)
        + bmha(d2, false)
        + conv(d2, d1, 3)
        + conv(2 * d1, d1, 1)
        + (c.blocks[0] - 1) * bmha(d1, true)
        + bmha(d1, false);
    let convdec = conv(d1, d0, 3) + conv(2 * d0, d0, 1) + conv(d0, d0, 3) + conv(2 * d0, d0, 1) + 4 * res(d0) + gn(d0) + conv(d0, c.num_classes, 1);
    let aux = conv(d1, c.num_classes, 1);
    stem + enc + merges + fusion + dec + convdec + aux
}

#[test]
fn same_seed_gives_identical_parameters() {
    let cfg = ModelConfig::micro();
    let a = Model::<f32>::build(&cfg, 7).unwrap();
    let b = Model::<f32>::build(&cfg, 7).unwrap();
    let c = Model::<f32>::build(&cfg, 8).unwrap();
    let mut differs = false;
    for ((na, ta), ((nb, tb), (_, tc))) in a.named_parameters().iter().zip(b.named_parameters().iter().zip(c.named_parameters().iter())) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor<f32>| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
        differs |= bits(ta) != bits(tc);
    }
    assert!(differs);
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [ModelConfig::micro(), ModelConfig::tiny(), ModelConfig::default()] {
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(m.parameter_count(), expected_count(&cfg), "{cfg:?}");
        let summed: usize = m.named_parameters().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(m.parameter_count(), summed);
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let mut cfg = ModelConfig::micro();
    cfg.heads[1] = 3;
    let err = Model::<f32>::build(&cfg, 0).unwrap_err();
    assert!(matches!(&err, Error::Config { field, .. } if field == "heads"), "{err}");
    let mut cfg = ModelConfig::micro();
    cfg.spatial_rank = 3;
    assert!(matches!(Model::<f32>::build(&cfg, 0), Err(Error::Config { field, .. }) if field == "spatial_rank"));
    let mut cfg = ModelConfig::micro();
    cfg.blocks[0] = 0;
    assert!(matches!(Model::<f32>::build(&cfg, 0), Err(Error::Config { field, .. }) if field == "blocks"));
}

#[test]
fn output_shapes_follow_input() {
    let m = Model::<f64>::build(&ModelConfig::micro(), 1).unwrap();
    let out = m.forward(&image(2, 1, 32, 48)).unwrap();
    assert_eq!(out.logits.shape(), &[2, 32, 48]);
    assert_eq!(out.aux_logits.shape(), &[2, 8, 12]);
    assert_eq!(out.encoder_maps[2].shape(), &[8, 2, 3]);
    assert_eq!(out.semantic_maps.len(), 3);
    assert_eq!(out.fused_maps[1].shape(), &[8, 2, 2]);
    assert!(m.forward(&image(2, 1, 24, 32)).is_err());
}

#[test]
fn tiny_model_on_32_pixels() {
    let m = Model::<f32>::build(&ModelConfig::tiny(), 1).unwrap();
    let out = m.forward(&image(3, 1, 32, 32).cast()).unwrap();
    assert_eq!(out.logits.shape(), &[2, 32, 32]);
    assert_eq!(out.aux_logits.shape(), &[2, 8, 8]);
}

#[test]
fn circular_model_shifts_deepest_map_with_input() {
    let cfg = ModelConfig {
        pad_mode: PadMode::Circular,
        ..ModelConfig::micro()
    };
    let m = Model::<f64>::build(&cfg, 4).unwrap();
    let (h, w) = (64, 48);
    let x = image(5, 1, h, w);
    let xv = x.to_vec();
    let shifted: Vec<f64> = (0..h * w).map(|p| xv[(p / w) * w + (p % w + w - 16) % w]).collect();
    let a = m.forward(&x).unwrap().encoder_maps[2].to_vec();
    let b = m.forward(&Tensor::from_vec(&[1, h, w], shifted).unwrap()).unwrap().encoder_maps[2].to_vec();
    let (dh, dw) = (h / 16, w / 16);
    for c in 0..8 {
        for y in 0..dh {
            for x in 0..dw {
                let want = a[(c * dh + y) * dw + (x + dw - 1) % dw];
                assert!((b[(c * dh + y) * dw + x] - want).abs() < 1e-4);
            }
        }
    }
}

fn probe_loss(m: &Model<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let out = m.forward(x)?;
    let wl = image(77, 2, x.shape()[1], x.shape()[2]);
    let wa = image(78, 2, x.shape()[1] / 4, x.shape()[2] / 4);
    // means keep the loss O(1) like the training losses, so finite-difference
    // rounding stays far below the comparison floor
    out.logits.mul(&wl)?.mean().add(&out.aux_logits.mul(&wa)?.mean())
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let m = Model::<f64>::build(&ModelConfig::micro(), 9).unwrap();
    let x = image(10, 1, 16, 16);
    let params = m.named_parameters().tensors();
    let opts = GradCheckOpts {
        max_coords: Some(2),
        seed: 3,
        ..Default::default()
    };
    let r = grad_check(|| probe_loss(&m, &x), &params, &opts).unwrap();
    let names: Vec<&str> = m.named_parameters().iter().map(|(n, _)| n).collect();
    assert!(r.max_rel_error < 1e-4, "{r:?} {}", names[r.worst_input]);
}

#[test]
fn every_parameter_gets_a_gradient() {
    let m = Model::<f64>::build(&ModelConfig::micro(), 11).unwrap();
    let mut seen = vec![false; m.named_parameters().len()];
    for seed in 0..5 {
        // 32 pixels so the deepest level has more than one token
        let loss = probe_loss(&m, &image(100 + seed, 1, 32, 32)).unwrap();
        let g = loss.backward().unwrap();
        for (i, (_, t)) in m.named_parameters().iter().enumerate() {
            seen[i] |= g.get(t).is_some_and(|v| v.iter().any(|&x| x != 0.0));
        }
    }
    let dead: Vec<&str> = m.named_parameters().iter().zip(&seen).filter(|(_, &s)| !s).map(|((n, _), _)| n).collect();
    assert!(dead.is_empty(), "no gradient: {dead:?}");
}

#[test]
fn batch_forward_matches_single() {
    let m = Model::<f64>::build(&ModelConfig::micro(), 12).unwrap();
    let ims = [image(1, 1, 16, 16), image(2, 1, 16, 16)];
    let batch = m.forward_batch(&ims).unwrap();
    for (im, out) in ims.iter().zip(&batch) {
        assert!(m.forward(im).unwrap().logits.max_abs_diff(&out.logits) < 1e-12);
    }
}

#[test]
fn low_rank_variant_builds_and_runs() {
    let cfg = ModelConfig {
        attention: AttentionKind::LowRank,
        ..ModelConfig::micro()
    };
    let m = Model::<f64>::build(&cfg, 13).unwrap();
    assert!(m.named_parameters().iter().all(|(n, _)| !n.starts_with("fusion") && !n.contains("semantic")));
    let out = m.forward(&image(1, 1, 32, 32)).unwrap();
    assert_eq!(out.logits.shape(), &[2, 32, 32]);
    assert!(out.semantic_maps.is_empty());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::micro();
    let m = Model::<f32>::build(&cfg, 14).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("norm_mean".to_string(), 0.25f64.to_string());
    let bytes = encode_checkpoint(&m, &meta);
    assert_eq!(&bytes[..7], CHECKPOINT_MAGIC);
    let back = decode_checkpoint::<f32>(&bytes).unwrap();
    assert_eq!(back.model.cfg, cfg);
    assert_eq!(back.meta, meta);
    assert_eq!(encode_checkpoint(&back.model, &back.meta), bytes);
    let x = image(15, 1, 16, 16).cast::<f32>();
    let a = m.forward(&x).unwrap().logits.to_vec();
    let b = back.model.forward(&x).unwrap().logits.to_vec();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = Model::<f32>::build(&ModelConfig::micro(), 16).unwrap();
    let bytes = encode_checkpoint(&m, &BTreeMap::new());
    let err = decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(decode_checkpoint::<f64>(&bytes).is_err());
}

#[test]
fn config_text_round_trip() {
    let cfg = ModelConfig {
        pad_mode: PadMode::Circular,
        attention: AttentionKind::LowRank,
        semantic_hw: (3, 2),
        ..ModelConfig::tiny()
    };
    let text = crate::config::write_kv(&cfg.to_kv());
    let mut r = KvReader::parse(&text).unwrap();
    assert_eq!(ModelConfig::from_reader(&mut r).unwrap(), cfg);
    r.finish().unwrap();
}
