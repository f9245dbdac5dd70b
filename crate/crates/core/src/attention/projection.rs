use crate::error::Result;
use crate::layers::{Conv2d, ParamBuilder};
use crate::tensor::{Float, Tensor};

/// Depthwise `k×k` convolution followed by a pointwise convolution. Without a
/// depthwise stage this is a plain 1×1 (token-wise linear) projection.
#[derive(Clone, Debug)]
pub struct ConvProjection<T: Float> {
    pub depthwise: Option<Conv2d<T>>,
    pub pointwise: Conv2d<T>,
}

impl<T: Float> ConvProjection<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, d: usize, kernel: Option<usize>) -> Self {
        ConvProjection {
            depthwise: kernel.map(|k| Conv2d::depthwise(&mut pb.sub("dw"), d, k)),
            pointwise: Conv2d::pointwise(&mut pb.sub("pw"), d, d),
        }
    }

    pub fn from_parts(depthwise: Option<Conv2d<T>>, pointwise: Conv2d<T>) -> Self {
        ConvProjection { depthwise, pointwise }
    }

    /// `[d, H, W] -> [d, H, W]`.
    pub fn forward_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.depthwise {
            Some(dw) => self.pointwise.forward(&dw.forward(x)?),
            None => self.pointwise.forward(x),
        }
    }

    /// `[d, H, W] -> [d, H·W]`, the channels-first sequence.
    pub fn project_cf(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_map(x)?.flatten()
    }
}

/// Convolutional projection flattened into a token sequence `[n, d]`.
pub fn conv_project<T: Float>(x: &Tensor<T>, proj: &ConvProjection<T>) -> Result<Tensor<T>> {
    proj.project_cf(x)?.transpose()
}
