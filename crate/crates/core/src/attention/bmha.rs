use super::{AttnConfig, ConvFfn, ConvProjection};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, GroupNorm, ParamBuilder};
use crate::tensor::{Float, Tensor};

/// Projections of the two streams. `x_k` / `m_k` exist only when query and key
/// weights are not shared; `x_v` / `m_out` are absent when the semantic stream
/// is not updated.
#[derive(Clone, Debug)]
pub struct BmhaWeights<T: Float> {
    pub x_qk: ConvProjection<T>,
    pub x_k: Option<ConvProjection<T>>,
    pub x_v: Option<ConvProjection<T>>,
    pub m_qk: ConvProjection<T>,
    pub m_k: Option<ConvProjection<T>>,
    pub m_v: ConvProjection<T>,
    pub x_out: Conv2d<T>,
    pub m_out: Option<Conv2d<T>>,
}

impl<T: Float> BmhaWeights<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, cfg: &AttnConfig) -> Self {
        Self::with_streams(pb, cfg, true)
    }

    pub fn with_streams(pb: &mut ParamBuilder<'_, T>, cfg: &AttnConfig, update_semantic: bool) -> Self {
        let (d, k) = (cfg.d, Some(cfg.k));
        let separate = !cfg.share_qk;
        BmhaWeights {
            x_qk: ConvProjection::new(&mut pb.sub("x_qk"), d, k),
            x_k: separate.then(|| ConvProjection::new(&mut pb.sub("x_k"), d, k)),
            x_v: update_semantic.then(|| ConvProjection::new(&mut pb.sub("x_v"), d, k)),
            m_qk: ConvProjection::new(&mut pb.sub("m_qk"), d, None),
            m_k: separate.then(|| ConvProjection::new(&mut pb.sub("m_k"), d, None)),
            m_v: ConvProjection::new(&mut pb.sub("m_v"), d, None),
            x_out: Conv2d::pointwise(&mut pb.sub("x_out"), d, d),
            m_out: update_semantic.then(|| Conv2d::pointwise(&mut pb.sub("m_out"), d, d)),
        }
    }
}

/// Raw bidirectional attention outputs, before the output projections.
pub struct BmhaAttention<T: Float> {
    /// `[d, H, W]`.
    pub x: Tensor<T>,
    /// `[d, h, w]`; `None` when the semantic stream is not updated.
    pub m: Option<Tensor<T>>,
    /// Per head `[n, l]`.
    pub x_weights: Vec<Tensor<T>>,
    /// Per head `[l, n]` (empty without a semantic update).
    pub m_weights: Vec<Tensor<T>>,
    /// Per head pre-softmax X-stream logits `[n, l]` (already scaled).
    pub logits: Vec<Tensor<T>>,
}

fn check_semantic<T: Float>(x: &Tensor<T>, m: &Tensor<T>, cfg: &AttnConfig) -> Result<()> {
    let (xs, ms) = (x.shape(), m.shape());
    if xs.len() != 3 || xs[0] != cfg.d {
        return Err(Error::shape("bmha", format!("token map {xs:?}, expected [{}, H, W]", cfg.d)));
    }
    if ms.len() != 3 || ms[0] != cfg.d || (ms[1], ms[2]) != cfg.semantic_hw {
        return Err(Error::shape(
            "bmha",
            format!(
                "semantic map {ms:?}, expected [{}, {}, {}]",
                cfg.d, cfg.semantic_hw.0, cfg.semantic_hw.1
            ),
        ));
    }
    Ok(())
}

/// Bidirectional attention between a token map `x` and a semantic map `m`.
///
/// With shared query/key weights the M-stream logits are the transpose of the
/// X-stream logits, so the `n×l` product is computed once.
pub fn bmha_attention<T: Float>(
    x: &Tensor<T>,
    m: &Tensor<T>,
    w: &BmhaWeights<T>,
    cfg: &AttnConfig,
) -> Result<BmhaAttention<T>> {
    cfg.validate()?;
    check_semantic(x, m, cfg)?;
    let q = w.x_qk.project_cf(x)?;
    let v = match &w.x_v {
        Some(p) => Some(p.project_cf(x)?),
        None => None,
    };
    let qbar = w.m_qk.project_cf(m)?;
    let vbar = w.m_v.project_cf(m)?;
    let k = match &w.x_k {
        Some(p) => Some(p.project_cf(x)?),
        None => None,
    };
    let kbar = match &w.m_k {
        Some(p) => Some(p.project_cf(m)?),
        None => None,
    };

    let dh = cfg.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let rows = |t: &Tensor<T>, h: usize| -> Result<Tensor<T>> {
        if cfg.n_heads == 1 {
            Ok(t.clone())
        } else {
            t.narrow(0, h * dh, dh)
        }
    };
    let mut xo = Vec::with_capacity(cfg.n_heads);
    let mut mo = Vec::with_capacity(cfg.n_heads);
    let mut xw = Vec::with_capacity(cfg.n_heads);
    let mut mw = Vec::with_capacity(cfg.n_heads);
    let mut logits = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, qbh, vbh) = (rows(&q, h)?, rows(&qbar, h)?, rows(&vbar, h)?);
        let kbh = match &kbar {
            Some(t) => rows(t, h)?,
            None => qbh.clone(),
        };
        let lx = qh.matmul_tn(&kbh)?.scale(scale);
        if let Some(v) = &v {
            let lm = match &k {
                Some(t) => qbh.matmul_tn(&rows(t, h)?)?.scale(scale),
                None => lx.transpose()?,
            };
            let am = lm.softmax(1)?;
            mo.push(rows(v, h)?.matmul_nt(&am)?);
            mw.push(am);
        }
        let ax = lx.softmax(1)?;
        xo.push(vbh.matmul_nt(&ax)?);
        xw.push(ax);
        logits.push(lx);
    }
    let m_new = if mo.is_empty() {
        None
    } else {
        Some(Tensor::concat(&mo, 0)?.reshape(m.shape())?)
    };
    Ok(BmhaAttention {
        x: Tensor::concat(&xo, 0)?.reshape(x.shape())?,
        m: m_new,
        x_weights: xw,
        m_weights: mw,
        logits,
    })
}

/// Pre-norm B-MHA block: each stream gets attention with a residual, then its
/// own convolutional FFN with a residual (1×1 kernels on the semantic stream).
/// A block built without a semantic update passes `m` through unchanged.
#[derive(Clone, Debug)]
pub struct BmhaBlock<T: Float> {
    pub x_norm1: GroupNorm<T>,
    pub m_norm1: GroupNorm<T>,
    pub attn: BmhaWeights<T>,
    pub x_norm2: GroupNorm<T>,
    pub m_norm2: Option<GroupNorm<T>>,
    pub x_ffn: ConvFfn<T>,
    pub m_ffn: Option<ConvFfn<T>>,
    pub cfg: AttnConfig,
}

impl<T: Float> BmhaBlock<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, cfg: &AttnConfig) -> Self {
        Self::with_streams(pb, cfg, true)
    }

    pub fn with_streams(pb: &mut ParamBuilder<'_, T>, cfg: &AttnConfig, update_semantic: bool) -> Self {
        let (d, u) = (cfg.d, update_semantic);
        BmhaBlock {
            x_norm1: GroupNorm::new(&mut pb.sub("x_norm1"), d),
            m_norm1: GroupNorm::new(&mut pb.sub("m_norm1"), d),
            attn: BmhaWeights::with_streams(&mut pb.sub("attn"), cfg, u),
            x_norm2: GroupNorm::new(&mut pb.sub("x_norm2"), d),
            m_norm2: u.then(|| GroupNorm::new(&mut pb.sub("m_norm2"), d)),
            x_ffn: ConvFfn::new(&mut pb.sub("x_ffn"), d, cfg.k),
            m_ffn: u.then(|| ConvFfn::new(&mut pb.sub("m_ffn"), d, 1)),
            cfg: cfg.clone(),
        }
    }

    /// Returns the updated streams and the raw attention record.
    pub fn forward_traced(&self, x: &Tensor<T>, m: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, BmhaAttention<T>)> {
        check_semantic(x, m, &self.cfg)?;
        let att = bmha_attention(&self.x_norm1.forward(x)?, &self.m_norm1.forward(m)?, &self.attn, &self.cfg)?;
        let x = x.add(&self.attn.x_out.forward(&att.x)?)?;
        let x = x.add(&self.x_ffn.forward(&self.x_norm2.forward(&x)?)?)?;
        let m = match (&att.m, &self.attn.m_out, &self.m_norm2, &self.m_ffn) {
            (Some(am), Some(out), Some(norm), Some(ffn)) => {
                let m = m.add(&out.forward(am)?)?;
                m.add(&ffn.forward(&norm.forward(&m)?)?)?
            }
            _ => m.clone(),
        };
        Ok((x, m, att))
    }

    pub fn forward(&self, x: &Tensor<T>, m: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (x, m, _) = self.forward_traced(x, m)?;
        Ok((x, m))
    }
}

/// `(X', M')` of one B-MHA block.
pub fn bmha<T: Float>(x: &Tensor<T>, m: &Tensor<T>, block: &BmhaBlock<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    block.forward(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attend;
    use crate::attention::test_util::*;
    use crate::layers::ParamStore;
    use crate::tensor::gradcheck::{grad_check, GradCheckOpts};

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn transpose_reuse_matches_independent_semantic_logits() {
        let cfg = AttnConfig::new(8, 2, (2, 2));
        let (w, _s) = build(1, |pb| BmhaWeights::new(pb, &cfg));
        let x = random_map(2, &[8, 4, 4]);
        let m = random_map(3, &[8, 2, 2]);
        let att = bmha_attention(&x, &m, &w, &cfg).unwrap();
        let qbar = w.m_qk.project_cf(&m).unwrap();
        let k = w.x_qk.project_cf(&x).unwrap();
        let v = w.x_v.as_ref().unwrap().project_cf(&x).unwrap();
        let want = attend(&qbar, &k, &v, 2, None).unwrap();
        assert!(max_diff(&att.m.unwrap().to_vec(), &want.out.to_vec()) < 1e-6);
        for (l, a) in att.logits.iter().zip(&want.weights) {
            let lm = l.transpose().unwrap().softmax(1).unwrap();
            assert!(lm.max_abs_diff(a) < 1e-6);
        }
    }

    fn set_identity(store: &ParamStore<f64>) {
        for (name, t) in store.iter() {
            let shape = t.shape().to_vec();
            t.update(|d| {
                d.fill(0.0);
                if name.ends_with("dw.weight") {
                    let kk = shape[2] * shape[3];
                    for c in 0..shape[0] {
                        d[c * kk + kk / 2] = 1.0;
                    }
                } else if name.ends_with("pw.weight") {
                    for c in 0..shape[0] {
                        d[c * shape[1] + c] = 1.0;
                    }
                }
            })
            .unwrap();
        }
    }

    #[test]
    fn identity_projections_give_dense_cross_attention() {
        let cfg = AttnConfig::new(6, 2, (3, 3));
        let (w, store) = build(4, |pb| BmhaWeights::new(pb, &cfg));
        set_identity(&store);
        let x = random_map(5, &[6, 3, 3]);
        let m = random_map(6, &[6, 3, 3]);
        let att = bmha_attention(&x, &m, &w, &cfg).unwrap();
        let (xs, ms) = (x.to_vec(), m.to_vec());
        let want_x = naive_attention(&xs, &ms, &ms, 6, 9, 9, 2);
        let want_m = naive_attention(&ms, &xs, &xs, 6, 9, 9, 2);
        assert!(max_diff(&att.x.to_vec(), &want_x) < 1e-6);
        assert!(max_diff(&att.m.unwrap().to_vec(), &want_m) < 1e-6);
    }

    #[test]
    fn unshared_weights_use_separate_keys() {
        let mut cfg = AttnConfig::new(4, 1, (2, 2));
        cfg.share_qk = false;
        let (w, _s) = build(7, |pb| BmhaWeights::new(pb, &cfg));
        let x = random_map(8, &[4, 4, 4]);
        let m = random_map(9, &[4, 2, 2]);
        let att = bmha_attention(&x, &m, &w, &cfg).unwrap();
        let q = w.x_qk.project_cf(&x).unwrap();
        let kbar = w.m_k.as_ref().unwrap().project_cf(&m).unwrap();
        let vbar = w.m_v.project_cf(&m).unwrap();
        let want = attend(&q, &kbar, &vbar, 1, None).unwrap();
        assert!(max_diff(&att.x.to_vec(), &want.out.to_vec()) < 1e-9);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = AttnConfig::new(8, 4, (2, 2));
        let (w, _s) = build(10, |pb| BmhaWeights::new(pb, &cfg));
        let att = bmha_attention(&random_map(11, &[8, 4, 4]), &random_map(12, &[8, 2, 2]), &w, &cfg).unwrap();
        for a in att.x_weights.iter().chain(&att.m_weights) {
            let cols = a.shape()[1];
            for row in a.to_vec().chunks(cols) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_preserves_shapes_and_rejects_wrong_semantic_size() {
        let cfg = AttnConfig::new(8, 2, (2, 2));
        let (blk, _s) = build(13, |pb| BmhaBlock::new(pb, &cfg));
        let x = random_map(14, &[8, 6, 4]);
        let (xo, mo) = bmha(&x, &random_map(15, &[8, 2, 2]), &blk).unwrap();
        assert_eq!(xo.shape(), &[8, 6, 4]);
        assert_eq!(mo.shape(), &[8, 2, 2]);
        let err = bmha(&x, &random_map(15, &[8, 3, 3]), &blk).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn x_only_block_keeps_semantic_map() {
        let cfg = AttnConfig::new(4, 2, (2, 2));
        let (full, _a) = build(20, |pb| BmhaBlock::new(pb, &cfg));
        let (xo, store) = build(20, |pb| BmhaBlock::with_streams(pb, &cfg, false));
        assert!(store.get("attn.x_v.pw.weight").is_none() && store.get("m_ffn.pw.weight").is_none());
        let x = random_map(21, &[4, 4, 4]);
        let m = random_map(22, &[4, 2, 2]);
        let (_, m2) = xo.forward(&x, &m).unwrap();
        assert_eq!(m2.to_vec(), m.to_vec());
        assert!(full.forward(&x, &m).unwrap().1.max_abs_diff(&m) > 1e-3);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = AttnConfig::new(4, 2, (2, 2));
        let (blk, store) = build(16, |pb| BmhaBlock::new(pb, &cfg));
        let x = Tensor::param(&[4, 4, 4], random_map(17, &[4, 4, 4]).to_vec()).unwrap();
        let m = Tensor::param(&[4, 2, 2], random_map(18, &[4, 2, 2]).to_vec()).unwrap();
        let mut inputs = vec![x.clone(), m.clone()];
        inputs.extend(store.tensors());
        let f = || {
            let (xo, mo) = bmha(&x, &m, &blk)?;
            // weight the outputs so the loss is not invariant to the norms
            let wx = Tensor::from_vec(xo.shape(), (0..xo.numel()).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect())?;
            let wm = Tensor::from_vec(mo.shape(), (0..mo.numel()).map(|i| ((i % 5) as f64 - 2.0) * 0.1).collect())?;
            xo.sum().add(&mo.sum())?.add(&xo.mul(&wx)?.sum().add(&mo.mul(&wm)?.sum())?)
        };
        let opts = GradCheckOpts {
            max_coords: Some(12),
            ..Default::default()
        };
        let r = grad_check(f, &inputs, &opts).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
