use super::split_axis;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

impl<T: Float> Tensor<T> {
    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(out[idx(a)]);
                }
                let mut s = T::zero();
                for a in 0..len {
                    let e = (out[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    out[idx(a)] /= s;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "softmax",
            vec![self.clone()],
            move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            gx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Per-sample group normalization of a channels-first tensor, followed by
    /// a per-channel affine map.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.shape()[0];
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "gamma {:?} / beta {:?} for input {:?}",
                    gamma.shape(),
                    beta.shape(),
                    self.shape()
                ),
            ));
        }
        if groups == 0 || !d.is_multiple_of(groups) {
            return Err(Error::shape(
                "group_norm",
                format!("{d} channels not divisible into {groups} groups"),
            ));
        }
        let spatial = self.numel() / d;
        let cpg = d / groups;
        let gsize = cpg * spatial;
        let eps = T::of(NORM_EPS);
        let mut xhat = self.to_vec();
        let mut inv_std = vec![T::zero(); groups];
        for (gi, chunk) in xhat.chunks_mut(gsize).enumerate() {
            let n = T::of(gsize as f64);
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        let mut out = xhat.clone();
        {
            let ga = gamma.data();
            let be = beta.data();
            for (c, chunk) in out.chunks_mut(spatial).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v * ga[c] + be[c]);
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "group_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _, inp| {
                let ga = inp[1].data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for c in 0..d {
                    let gs = &g[c * spatial..(c + 1) * spatial];
                    let xs = &xhat[c * spatial..(c + 1) * spatial];
                    dgamma[c] = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    dbeta[c] = gs.iter().copied().sum();
                }
                let dx = inp[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    let n = T::of(gsize as f64);
                    for gi in 0..groups {
                        let range = gi * gsize..(gi + 1) * gsize;
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for i in range.clone() {
                            let dxh = g[i] * ga[i / spatial];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[i];
                        }
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        for i in range {
                            let dxh = g[i] * ga[i / spatial];
                            dx[i] = inv_std[gi] * (dxh - mean_dxh - xhat[i] * mean_dxh_xh);
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            },
        ))
    }
}
