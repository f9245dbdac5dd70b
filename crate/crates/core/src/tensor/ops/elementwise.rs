use super::split_axis;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const GELU_COEFF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), other.clone()],
            |g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), other.clone()],
            |g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), other.clone()],
            |g, _, inp| {
                let a = inp[0].data();
                let b = inp[1].data();
                let ga = inp[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect());
                let gb = inp[1]
                    .requires_grad()
                    .then(|| g.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            },
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "div",
            vec![self.clone(), other.clone()],
            |g, out, inp| {
                let b = inp[1].data();
                let ga = inp[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g / y).collect());
                let gb = inp[1].requires_grad().then(|| {
                    g.iter()
                        .zip(out.iter().zip(b.iter()))
                        .map(|(&g, (&q, &y))| -g * q / y)
                        .collect()
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "scale",
            vec![self.clone()],
            move |g, _, _| vec![Some(g.iter().map(|&v| v * c).collect())],
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add_scalar",
            vec![self.clone()],
            |g, _, _| vec![Some(g.to_vec())],
        )
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::of(GELU_SCALE);
        let k = T::of(GELU_COEFF);
        let half = T::of(0.5);
        let one = T::one();
        let three = T::of(3.0);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (one + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "gelu",
            vec![self.clone()],
            move |g, _, inp| {
                let x = inp[0].data();
                let gx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (one + t)
                            + half * x * (one - t * t) * c * (one + three * k * x * x);
                        g * d
                    })
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.max(T::zero())).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "relu",
            vec![self.clone()],
            |g, _, inp| {
                let x = inp[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "exp",
            vec![self.clone()],
            |g, out, _| vec![Some(g.iter().zip(out).map(|(&g, &y)| g * y).collect())],
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, floor: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.max(floor).ln()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "log_clamped",
            vec![self.clone()],
            move |g, _, inp| {
                let x = inp[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > floor { g / x } else { T::zero() })
                        .collect(),
                )]
            },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], "sum", vec![self.clone()], move |g, _, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sums over one axis, removing it. A rank-1 input reduces to `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for a in 0..len {
                    let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            shape,
            out,
            "sum_axis",
            vec![self.clone()],
            move |g, _, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 0).
    pub fn add_channel_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.shape()[0];
        if bias.shape() != [d] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", bias.shape(), self.shape()),
            ));
        }
        let inner = self.numel() / d;
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for (c, chunk) in data.chunks_mut(inner).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[c]);
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add_channel_bias",
            vec![self.clone(), bias.clone()],
            move |g, _, _| {
                let gb = g.chunks(inner).map(|c| c.iter().copied().sum()).collect();
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }
}
