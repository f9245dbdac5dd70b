//! Parameter storage and the small parameterised layers the model is built from.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Conv2dOpts, Float, PadMode, Tensor};

/// Name-sorted parameter tensors. Layers hold clones of the same handles, so
/// assigning through the store is visible to the layers.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Float> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.map.values().cloned().collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Const(f64),
}

/// Creates named parameters from a seeded generator.
pub struct ParamBuilder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    pub pad_mode: PadMode,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_pad_mode(mut self, pad_mode: PadMode) -> Self {
        self.pad_mode = pad_mode;
        self
    }

    /// A builder whose names are nested under `name.`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            pad_mode: self.pad_mode,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Const(v) => vec![T::of(v); n],
            Init::Fan { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::of(dist.sample(self.rng))).collect()
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let t = Tensor::param(shape, data).expect("positive extents");
        let prev = self.store.map.insert(full.clone(), t.clone());
        assert!(prev.is_none(), "duplicate parameter name {full}");
        t
    }
}

/// Convenience for tests and examples: a builder over a fresh store.
pub fn seeded_store<T: Float>(seed: u64) -> (ParamStore<T>, ChaCha8Rng) {
    (ParamStore::default(), ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub opts: Conv2dOpts,
}

impl<T: Float> Conv2d<T> {
    /// `k×k` convolution with the given stride and padding, plus a bias.
    pub fn new(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::build(pb, cin, cout, k, stride, pad, 1, 1.0)
    }

    /// Same-padded stride-1 convolution.
    pub fn same(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(pb, cin, cout, k, 1, k / 2)
    }

    pub fn pointwise(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Self {
        Self::new(pb, cin, cout, 1, 1, 0)
    }

    /// Same-padded depthwise convolution over `d` channels.
    pub fn depthwise(pb: &mut ParamBuilder<'_, T>, d: usize, k: usize) -> Self {
        Self::build(pb, d, d, k, 1, k / 2, d, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        pb: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        gain: f64,
    ) -> Self {
        let fan_in = cin / groups * k * k;
        let weight = pb.tensor("weight", &[cout, cin / groups, k, k], Init::Fan { fan_in, gain });
        let bias = Some(pb.tensor("bias", &[cout], Init::Const(0.0)));
        Conv2d {
            weight,
            bias,
            opts: Conv2dOpts {
                stride,
                pad,
                groups,
                pad_mode: pb.pad_mode,
            },
        }
    }

    pub fn from_weights(weight: Tensor<T>, bias: Option<Tensor<T>>, opts: Conv2dOpts) -> Self {
        Conv2d { weight, bias, opts }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.conv2d(&self.weight, self.opts)?;
        match &self.bias {
            Some(b) => y.add_channel_bias(b),
            None => Ok(y),
        }
    }
}

/// Group count used everywhere: 8 channels per group, one group otherwise.
pub fn norm_groups(d: usize) -> usize {
    if d >= 8 && d.is_multiple_of(8) {
        d / 8
    } else {
        1
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
}

impl<T: Float> GroupNorm<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        GroupNorm {
            gamma: pb.tensor("gamma", &[d], Init::Const(1.0)),
            beta: pb.tensor("beta", &[d], Init::Const(0.0)),
            groups: norm_groups(d),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gamma, &self.beta)
    }
}

/// Token-wise linear map on a channels-first sequence `[d_in, L] -> [d_out, L]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, din: usize, dout: usize) -> Self {
        Linear {
            weight: pb.tensor("weight", &[dout, din], Init::Fan { fan_in: din, gain: 1.0 }),
            bias: pb.tensor("bias", &[dout], Init::Const(0.0)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.weight.matmul(x)?.add_channel_bias(&self.bias)
    }
}
