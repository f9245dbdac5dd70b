//! Initial semantic map generation and token-compression diagnostics.

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamBuilder};
use crate::tensor::{Float, Tensor};

/// Two 3×3 convolutions: one predicts `h·w` aggregation logits per position,
/// the other the base token map being aggregated.
#[derive(Clone, Debug)]
pub struct SemanticMapInit<T: Float> {
    pub weight_conv: Conv2d<T>,
    pub base_conv: Conv2d<T>,
    pub target: (usize, usize),
}

impl<T: Float> SemanticMapInit<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, d: usize, target: (usize, usize)) -> Self {
        SemanticMapInit {
            weight_conv: Conv2d::same(&mut pb.sub("weight"), d, target.0 * target.1, 3),
            base_conv: Conv2d::same(&mut pb.sub("base"), d, d, 3),
            target,
        }
    }
}

/// Semantic map plus the softmaxed aggregation weights `[h·w, H·W]`.
pub struct SemanticInitTrace<T: Float> {
    pub map: Tensor<T>,
    pub weights: Tensor<T>,
}

pub fn init_semantic_map_traced<T: Float>(x: &Tensor<T>, init: &SemanticMapInit<T>) -> Result<SemanticInitTrace<T>> {
    let l = init.target.0 * init.target.1;
    if init.weight_conv.out_channels() != l {
        return Err(Error::shape(
            "init_semantic_map",
            format!("weight conv has {} outputs for a {l}-token map", init.weight_conv.out_channels()),
        ));
    }
    let weights = init.weight_conv.forward(x)?.flatten()?.softmax(1)?;
    let base = init.base_conv.forward(x)?.flatten()?;
    let d = base.shape()[0];
    let map = base.matmul_nt(&weights)?.reshape(&[d, init.target.0, init.target.1])?;
    Ok(SemanticInitTrace { map, weights })
}

/// `[d, H, W] -> [d, h, w]`: every semantic token is a softmax-weighted
/// average of the base tokens.
pub fn init_semantic_map<T: Float>(x: &Tensor<T>, init: &SemanticMapInit<T>) -> Result<Tensor<T>> {
    Ok(init_semantic_map_traced(x, init)?.map)
}

/// Absolute cosine similarity between all pairs of semantic tokens, `[l, l]`.
pub fn token_cosine_similarity<T: Float>(m: &Tensor<T>) -> Result<Tensor<T>> {
    if m.rank() < 2 {
        return Err(Error::shape("token_cosine_similarity", format!("{:?}", m.shape())));
    }
    let d = m.shape()[0];
    let l = m.numel() / d;
    let data = m.to_vec();
    let data = &data;
    let token = move |j: usize| (0..d).map(move |c| data[c * l + j].as_f64());
    let norms: Vec<f64> = (0..l).map(|j| token(j).map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(index) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateToken { index });
    }
    let mut out = vec![T::zero(); l * l];
    for i in 0..l {
        out[i * l + i] = T::one();
        for j in i + 1..l {
            let dot: f64 = token(i).zip(token(j)).map(|(a, b)| a * b).sum();
            let c = T::of((dot / (norms[i] * norms[j])).abs().min(1.0));
            out[i * l + j] = c;
            out[j * l + i] = c;
        }
    }
    Tensor::from_vec(&[l, l], out)
}
