//! Attention variants and the convolutional Transformer sub-layers.
//!
//! Token maps are channels-first `[d, H, W]`. Internally every sequence is kept
//! as a `[d, n]` matrix so that a head is a contiguous block of rows; logits are
//! `[n_query, n_key]`.

mod bmha;
mod efficient;
mod ffn;
mod projection;
mod window;

pub use bmha::{bmha, bmha_attention, BmhaAttention, BmhaBlock, BmhaWeights};
pub use efficient::{bilinear_matrix, efficient_attention, LowRankBlock, LowRankProjector};
pub use ffn::{conv_ffn, ConvFfn};
pub use projection::{conv_project, ConvProjection};
pub use window::{shifted_window_mask, shifted_window_mhsa_forward, window_mhsa_forward};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamBuilder};
use crate::tensor::{Float, PadMode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttnConfig {
    /// Embedding channels.
    pub d: usize,
    pub n_heads: usize,
    /// Kernel of the depthwise projection / FFN convolutions.
    pub k: usize,
    /// Spatial extent `(h, w)` of the semantic map / reduced key set.
    pub semantic_hw: (usize, usize),
    /// Query and key share weights within each stream.
    pub share_qk: bool,
    pub pad_mode: PadMode,
}

impl AttnConfig {
    pub fn new(d: usize, n_heads: usize, semantic_hw: (usize, usize)) -> Self {
        AttnConfig {
            d,
            n_heads,
            k: 3,
            semantic_hw,
            share_qk: true,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("{} channels not divisible by {} heads", self.d, self.n_heads),
            ));
        }
        if self.semantic_hw.0 * self.semantic_hw.1 == 0 {
            return Err(Error::config("semantic_hw", "must contain at least one token"));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::config("k", "projection kernel must be odd"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn semantic_len(&self) -> usize {
        self.semantic_hw.0 * self.semantic_hw.1
    }
}

/// Output of a multi-head attention call.
pub struct Attended<T: Float> {
    /// `[d, n_query]`.
    pub out: Tensor<T>,
    /// Per-head attention matrices `[n_query, n_key]`, rows sum to 1.
    pub weights: Vec<Tensor<T>>,
}

/// Per-head `softmax(q_hᵀ k_h / sqrt(d_h)) v_h` on channels-first sequences.
///
/// `q: [d, nq]`, `k, v: [d, nk]`; an optional additive `mask: [nq, nk]`.
pub fn attend<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Attended<T>> {
    let d = q.shape()[0];
    if k.shape()[0] != d || v.shape() != k.shape() || n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::shape(
            "attend",
            format!("q {:?}, k {:?}, v {:?}, {n_heads} heads", q.shape(), k.shape(), v.shape()),
        ));
    }
    let dh = d / n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = head_slices(q, k, v, h, dh)?;
        let mut logits = qh.matmul_tn(&kh)?.scale(scale);
        if let Some(m) = mask {
            logits = logits.add(m)?;
        }
        let a = logits.softmax(1)?;
        outs.push(vh.matmul_nt(&a)?);
        weights.push(a);
    }
    Ok(Attended {
        out: Tensor::concat(&outs, 0)?,
        weights,
    })
}

fn head_slices<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    h: usize,
    dh: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if q.shape()[0] == dh {
        return Ok((q.clone(), k.clone(), v.clone()));
    }
    Ok((
        q.narrow(0, h * dh, dh)?,
        k.narrow(0, h * dh, dh)?,
        v.narrow(0, h * dh, dh)?,
    ))
}

/// Query / key / value projections plus the output projection of a
/// self-attention layer.
#[derive(Clone, Debug)]
pub struct MhsaWeights<T: Float> {
    pub q: ConvProjection<T>,
    pub k: ConvProjection<T>,
    pub v: ConvProjection<T>,
    pub out: Conv2d<T>,
}

impl<T: Float> MhsaWeights<T> {
    /// Projections are depthwise-separable when `conv_proj`, otherwise 1×1.
    pub fn new(pb: &mut ParamBuilder<'_, T>, cfg: &AttnConfig, conv_proj: bool) -> Self {
        let kern = conv_proj.then_some(cfg.k);
        MhsaWeights {
            q: ConvProjection::new(&mut pb.sub("q"), cfg.d, kern),
            k: ConvProjection::new(&mut pb.sub("k"), cfg.d, kern),
            v: ConvProjection::new(&mut pb.sub("v"), cfg.d, kern),
            out: Conv2d::pointwise(&mut pb.sub("out"), cfg.d, cfg.d),
        }
    }
}

/// Dense multi-head self-attention over all `n = H·W` tokens.
///
/// Returns the concatenated head outputs before the output projection.
pub fn dense_mhsa<T: Float>(x: &Tensor<T>, w: &MhsaWeights<T>, cfg: &AttnConfig) -> Result<Tensor<T>> {
    dense_mhsa_full(x, w, cfg)?.out.reshape(x.shape())
}

pub(crate) fn dense_mhsa_full<T: Float>(
    x: &Tensor<T>,
    w: &MhsaWeights<T>,
    cfg: &AttnConfig,
) -> Result<Attended<T>> {
    cfg.validate()?;
    let q = w.q.project_cf(x)?;
    let k = w.k.project_cf(x)?;
    let v = w.v.project_cf(x)?;
    attend(&q, &k, &v, cfg.n_heads, None)
}

/// Attention layer as benchmarked: projections, attention, output projection.
pub fn mhsa_layer<T: Float>(x: &Tensor<T>, w: &MhsaWeights<T>, cfg: &AttnConfig) -> Result<Tensor<T>> {
    w.out.forward(&dense_mhsa(x, w, cfg)?)
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use crate::layers::{seeded_store, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_map(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    pub fn build<W>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> W) -> (W, ParamStore<f64>) {
        let (mut store, mut rng) = seeded_store::<f64>(seed);
        let w = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            f(&mut pb)
        };
        // biases start at zero; randomise them so they are exercised
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for (name, t) in store.iter() {
            if name.ends_with("bias") || name.ends_with("beta") {
                t.update(|d| d.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3))).unwrap();
            }
        }
        (w, store)
    }

    /// Naive single-loop multi-head attention on `[d, n]` sequences.
    pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], d: usize, nq: usize, nk: usize, heads: usize) -> Vec<f64> {
        let dh = d / heads;
        let mut out = vec![0.0; d * nq];
        for h in 0..heads {
            for i in 0..nq {
                let logits: Vec<f64> = (0..nk)
                    .map(|j| {
                        (0..dh).map(|c| q[(h * dh + c) * nq + i] * k[(h * dh + c) * nk + j]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..dh {
                    out[(h * dh + c) * nq + i] = (0..nk).map(|j| e[j] / s * v[(h * dh + c) * nk + j]).sum();
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn single_token_returns_value_projection() {
        let cfg = AttnConfig::new(4, 2, (1, 1));
        let (w, _s) = build(1, |pb| MhsaWeights::new(pb, &cfg, true));
        let x = random_map(2, &[4, 1, 1]);
        let y = dense_mhsa(&x, &w, &cfg).unwrap();
        let v = w.v.forward_map(&x).unwrap();
        assert!(y.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let cfg = AttnConfig::new(4, 2, (1, 1));
        let (w, _s) = build(3, |pb| MhsaWeights::new(pb, &cfg, false));
        let x = Tensor::<f64>::from_vec(&[4, 3, 3], (0..36).map(|i| (i / 9) as f64 * 0.4 - 0.5).collect()).unwrap();
        let y = dense_mhsa(&x, &w, &cfg).unwrap().to_vec();
        for c in 0..4 {
            let row = &y[c * 9..(c + 1) * 9];
            assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn two_heads_match_naive_loop() {
        let cfg = AttnConfig::new(6, 2, (1, 1));
        let (w, _s) = build(4, |pb| MhsaWeights::new(pb, &cfg, true));
        let x = random_map(5, &[6, 3, 3]);
        let y = dense_mhsa(&x, &w, &cfg).unwrap();
        let q = w.q.project_cf(&x).unwrap().to_vec();
        let k = w.k.project_cf(&x).unwrap().to_vec();
        let v = w.v.project_cf(&x).unwrap().to_vec();
        let want = naive_attention(&q, &k, &v, 6, 9, 9, 2);
        let got = y.to_vec();
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = AttnConfig::new(6, 4, (2, 2));
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
