use super::split_axis;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            |g, _, _| vec![Some(g.to_vec())],
        ))
    }

    /// Collapses all axes after the first: `[d, ...] -> [d, n]`.
    pub fn flatten(&self) -> Result<Tensor<T>> {
        let d = self.shape()[0];
        self.reshape(&[d, self.numel() / d])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let [r, c] = *self.shape() else {
            return Err(Error::shape(
                "transpose",
                format!("needs rank 2, got {:?}", self.shape()),
            ));
        };
        let out = transpose_buf(&self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            "transpose",
            vec![self.clone()],
            move |g, _, _| vec![Some(transpose_buf(g, c, r))],
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "empty input list"))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (g, &len) in guards.iter().zip(&lens) {
                out.extend_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
        }
        drop(guards);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens_b = lens.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            "concat",
            parts.to_vec(),
            move |g, _, inp| {
                let mut grads: Vec<Vec<T>> = lens_b
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gv, &len) in grads.iter_mut().zip(&lens_b) {
                        gv.extend_from_slice(&g[off..off + len * inner]);
                        off += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inp)
                    .map(|(gv, t)| t.requires_grad().then_some(gv))
                    .collect()
            },
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{start}+{len} on axis {axis} of {:?}", self.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            shape,
            out,
            "narrow",
            vec![self.clone()],
            move |g, _, _| {
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Splits into consecutive pieces of the given lengths along `axis`.
    pub fn split(&self, axis: usize, lens: &[usize]) -> Result<Vec<Tensor<T>>> {
        if axis >= self.rank() || lens.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::shape(
                "split",
                format!("lengths {lens:?} on axis {axis} of {:?}", self.shape()),
            ));
        }
        let mut start = 0;
        lens.iter()
            .map(|&l| {
                let t = self.narrow(axis, start, l);
                start += l;
                t
            })
            .collect()
    }

    /// Splits into `n` equal pieces along `axis`.
    pub fn chunk(&self, n: usize, axis: usize) -> Result<Vec<Tensor<T>>> {
        if axis >= self.rank() || n == 0 || !self.shape()[axis].is_multiple_of(n) {
            return Err(Error::shape(
                "chunk",
                format!("{n} chunks on axis {axis} of {:?}", self.shape()),
            ));
        }
        let l = self.shape()[axis] / n;
        self.split(axis, &vec![l; n])
    }

    /// Nearest-neighbour 2× upsampling of `[d, H, W]`.
    pub fn upsample2x(&self) -> Result<Tensor<T>> {
        let [d, h, w] = *self.shape() else {
            return Err(Error::shape("upsample2x", format!("needs [d, h, w], got {:?}", self.shape())));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); d * h2 * w2];
        {
            let x = self.data();
            for c in 0..d {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        out[(c * h2 + y) * w2 + xx] = x[(c * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![d, h2, w2],
            out,
            "upsample2x",
            vec![self.clone()],
            move |g, _, _| {
                let mut gx = vec![T::zero(); d * h * w];
                for c in 0..d {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[(c * h + y / 2) * w + xx / 2] += g[(c * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Rearranges each 2×2 neighbourhood of `[d, H, W]` into channels,
    /// giving `[4d, H/2, W/2]`. Offsets are stacked in the order
    /// (0,0), (1,0), (0,1), (1,1) as (row, col).
    pub fn space_to_depth2(&self) -> Result<Tensor<T>> {
        let [d, h, w] = *self.shape() else {
            return Err(Error::shape("space_to_depth2", format!("needs [d, h, w], got {:?}", self.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("space_to_depth2", format!("odd extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let index = move |q: usize, c: usize, y: usize, x: usize| {
            let (dy, dx) = (q % 2, q / 2);
            (c * h + 2 * y + dy) * w + 2 * x + dx
        };
        let mut out = Vec::with_capacity(self.numel());
        {
            let src = self.data();
            for q in 0..4 {
                for c in 0..d {
                    for y in 0..ho {
                        for x in 0..wo {
                            out.push(src[index(q, c, y, x)]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![4 * d, ho, wo],
            out,
            "space_to_depth2",
            vec![self.clone()],
            move |g, _, _| {
                let mut gx = vec![T::zero(); d * h * w];
                let mut i = 0;
                for q in 0..4 {
                    for c in 0..d {
                        for y in 0..ho {
                            for x in 0..wo {
                                gx[index(q, c, y, x)] = g[i];
                                i += 1;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Gathers columns of a 2-D tensor: `[r, n] -> [r, idx.len()]`.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let [r, n] = *self.shape() else {
            return Err(Error::shape("select_columns", format!("needs rank 2, got {:?}", self.shape())));
        };
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("select_columns", format!("index out of range for {n} columns")));
        }
        let m = idx.len();
        let mut out = Vec::with_capacity(r * m);
        {
            let x = self.data();
            for row in 0..r {
                out.extend(idx.iter().map(|&i| x[row * n + i]));
            }
        }
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![r, m],
            out,
            "select_columns",
            vec![self.clone()],
            move |g, _, _| {
                let mut gx = vec![T::zero(); r * n];
                for row in 0..r {
                    for (j, &i) in idx.iter().enumerate() {
                        gx[row * n + i] += g[row * m + j];
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}

fn transpose_buf<T: Float>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_single_value() {
        let t = Tensor::<f32>::from_vec(&[1, 1, 1], vec![4.5]).unwrap();
        let u = t.upsample2x().unwrap();
        assert_eq!(u.shape(), &[1, 2, 2]);
        assert_eq!(u.to_vec(), vec![4.5; 4]);
    }

    #[test]
    fn flatten_reshape_round_trip() {
        let data: Vec<f32> = (0..24).map(|v| v as f32 * 0.5).collect();
        let t = Tensor::<f32>::from_vec(&[2, 3, 4], data.clone()).unwrap();
        let back = t.flatten().unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(back.shape(), &[2, 3, 4]);
        assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![5., 6.]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1., 2., 5., 3., 4., 6.]);
        let parts = c.split(1, &[2, 1]).unwrap();
        assert_eq!(parts[0].to_vec(), a.to_vec());
        assert_eq!(parts[1].to_vec(), b.to_vec());
    }

    #[test]
    fn incompatible_concat_is_error() {
        let a = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        let b = Tensor::<f64>::zeros(&[3, 1]).unwrap();
        assert!(Tensor::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn space_to_depth_follows_swin_order() {
        // single channel 2x2: [[a, b], [c, d]] -> channels a, c, b, d
        let t = Tensor::<f32>::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = t.space_to_depth2().unwrap();
        assert_eq!(s.shape(), &[4, 1, 1]);
        assert_eq!(s.to_vec(), vec![1., 3., 2., 4.]);
    }
}
