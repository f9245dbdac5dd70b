//! Global fusion of the per-scale semantic maps.

use crate::attention::{dense_mhsa, AttnConfig, MhsaWeights};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, GroupNorm, ParamBuilder};
use crate::tensor::{Float, Tensor};

pub const FFN_RATIO: usize = 4;

/// Plain pre-norm Transformer block over a `[d, L]` token sequence: dense
/// self-attention and a position-wise two-layer FFN, no positional encoding.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T: Float> {
    pub norm1: GroupNorm<T>,
    pub attn: MhsaWeights<T>,
    pub norm2: GroupNorm<T>,
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    pub cfg: AttnConfig,
}

impl<T: Float> TransformerBlock<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, d: usize, n_heads: usize) -> Self {
        let cfg = AttnConfig::new(d, n_heads, (1, 1));
        TransformerBlock {
            norm1: GroupNorm::new(&mut pb.sub("norm1"), d),
            attn: MhsaWeights::new(&mut pb.sub("attn"), &cfg, false),
            norm2: GroupNorm::new(&mut pb.sub("norm2"), d),
            fc1: Conv2d::pointwise(&mut pb.sub("fc1"), d, d * FFN_RATIO),
            fc2: Conv2d::pointwise(&mut pb.sub("fc2"), d * FFN_RATIO, d),
            cfg,
        }
    }

    /// `[d, L] -> [d, L]`.
    pub fn forward(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, l) = (seq.shape()[0], seq.shape()[1]);
        let x = seq.reshape(&[d, l, 1])?;
        let a = dense_mhsa(&self.norm1.forward(&x)?, &self.attn, &self.cfg)?;
        let x = x.add(&self.attn.out.forward(&a)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu();
        x.add(&self.fc2.forward(&h)?)?.reshape(&[d, l])
    }
}

/// Per-scale 1×1 projections into a common width, a stack of Transformer
/// blocks over the concatenated tokens, and projections back with a residual.
#[derive(Clone, Debug)]
pub struct SemanticFusion<T: Float> {
    pub widths: Vec<usize>,
    pub proj_in: Vec<Conv2d<T>>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub proj_out: Vec<Conv2d<T>>,
}

impl<T: Float> SemanticFusion<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, widths: &[usize], d_fuse: usize, n_blocks: usize, n_heads: usize) -> Self {
        SemanticFusion {
            widths: widths.to_vec(),
            proj_in: (0..widths.len())
                .map(|i| Conv2d::pointwise(&mut pb.sub(&format!("in{i}")), widths[i], d_fuse))
                .collect(),
            blocks: (0..n_blocks)
                .map(|i| TransformerBlock::new(&mut pb.sub(&format!("block{i}")), d_fuse, n_heads))
                .collect(),
            proj_out: (0..widths.len())
                .map(|i| Conv2d::pointwise(&mut pb.sub(&format!("out{i}")), d_fuse, widths[i]))
                .collect(),
        }
    }

    /// The Transformer stack alone, on a `[d_fuse, L]` sequence.
    pub fn transform(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = seq.clone();
        for b in &self.blocks {
            s = b.forward(&s)?;
        }
        Ok(s)
    }
}

/// Fuses semantic maps from all scales; the outputs keep the input shapes and order.
pub fn fuse_semantic_maps<T: Float>(maps: &[Tensor<T>], fusion: &SemanticFusion<T>) -> Result<Vec<Tensor<T>>> {
    if maps.is_empty() || maps.len() != fusion.widths.len() {
        return Err(Error::shape(
            "fuse_semantic_maps",
            format!("{} maps for {} fusion scales", maps.len(), fusion.widths.len()),
        ));
    }
    for (i, (m, &d)) in maps.iter().zip(&fusion.widths).enumerate() {
        if m.rank() != 3 || m.shape()[0] != d {
            return Err(Error::shape(
                "fuse_semantic_maps",
                format!("scale {i} has shape {:?}, expected {d} channels", m.shape()),
            ));
        }
    }
    let mut seqs = Vec::with_capacity(maps.len());
    let mut lens = Vec::with_capacity(maps.len());
    for (m, p) in maps.iter().zip(&fusion.proj_in) {
        let s = p.forward(m)?.flatten()?;
        lens.push(s.shape()[1]);
        seqs.push(s);
    }
    let fused = fusion.transform(&Tensor::concat(&seqs, 1)?)?;
    let d_fuse = fused.shape()[0];
    fused
        .split(1, &lens)?
        .into_iter()
        .zip(maps)
        .zip(&fusion.proj_out)
        .map(|((s, m), p)| {
            let s = s.reshape(&[d_fuse, m.shape()[1], m.shape()[2]])?;
            m.add(&p.forward(&s)?)
        })
        .collect()
}
