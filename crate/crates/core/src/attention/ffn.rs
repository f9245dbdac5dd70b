use crate::error::Result;
use crate::layers::{Conv2d, ParamBuilder};
use crate::tensor::{Float, Tensor};

/// MBConv-style feed-forward: depthwise `k×k` conv, GELU, pointwise conv.
#[derive(Clone, Debug)]
pub struct ConvFfn<T: Float> {
    pub depthwise: Conv2d<T>,
    pub pointwise: Conv2d<T>,
}

impl<T: Float> ConvFfn<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, d: usize, k: usize) -> Self {
        ConvFfn {
            depthwise: Conv2d::depthwise(&mut pb.sub("dw"), d, k),
            pointwise: Conv2d::pointwise(&mut pb.sub("pw"), d, d),
        }
    }

    /// The block without its residual.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.pointwise.forward(&self.depthwise.forward(x)?.gelu())
    }
}

/// `x + ConvBlock(x)` on a `[d, H, W]` map (sequences are reshaped by the caller).
pub fn conv_ffn<T: Float>(x: &Tensor<T>, w: &ConvFfn<T>) -> Result<Tensor<T>> {
    x.add(&w.forward(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::test_util::*;

    #[test]
    fn zero_weights_with_residual_is_identity() {
        let (w, store) = build(1, |pb| ConvFfn::new(pb, 4, 3));
        for (_, t) in store.iter() {
            t.update(|d| d.fill(0.0)).unwrap();
        }
        let x = random_map(2, &[4, 5, 5]);
        assert_eq!(conv_ffn(&x, &w).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn unit_kernel_is_position_wise_two_layer_ffn() {
        let d = 3;
        let (w, _s) = build(3, |pb| ConvFfn::new(pb, d, 1));
        let x = random_map(4, &[d, 4, 4]);
        let got = w.forward(&x).unwrap().to_vec();
        let w1 = w.depthwise.weight.to_vec();
        let b1 = w.depthwise.bias.as_ref().unwrap().to_vec();
        let w2 = w.pointwise.weight.to_vec();
        let b2 = w.pointwise.bias.as_ref().unwrap().to_vec();
        let xs = x.to_vec();
        let gelu = |v: f64| 0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044715 * v.powi(3))).tanh());
        for p in 0..16 {
            let hidden: Vec<f64> = (0..d).map(|c| gelu(w1[c] * xs[c * 16 + p] + b1[c])).collect();
            for o in 0..d {
                let want = b2[o] + (0..d).map(|c| w2[o * d + c] * hidden[c]).sum::<f64>();
                assert!((got[o * 16 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_op_composition() {
        let (w, _s) = build(5, |pb| ConvFfn::new(pb, 4, 3));
        let x = random_map(6, &[4, 4, 4]);
        let dw = &w.depthwise;
        let pw = &w.pointwise;
        let mid = x
            .conv2d(&dw.weight, dw.opts)
            .unwrap()
            .add_channel_bias(dw.bias.as_ref().unwrap())
            .unwrap()
            .gelu();
        let out = mid
            .conv2d(&pw.weight, pw.opts)
            .unwrap()
            .add_channel_bias(pw.bias.as_ref().unwrap())
            .unwrap();
        let want = x.add(&out).unwrap();
        assert_eq!(conv_ffn(&x, &w).unwrap().to_vec(), want.to_vec());
    }
}
