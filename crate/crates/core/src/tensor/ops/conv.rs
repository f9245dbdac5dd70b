use super::linalg::gemm;
use crate::error::{Error, Result};
use crate::tensor::{macs, Float, Tensor};

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Zero,
    /// Wrap around the image edges (translation-probe mode).
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts {
            stride: 1,
            pad: 0,
            groups: 1,
            pad_mode: PadMode::Zero,
        }
    }
}

impl Conv2dOpts {
    /// Stride 1 with padding that preserves the spatial extent of an odd kernel.
    pub fn same(k: usize) -> Self {
        Conv2dOpts {
            pad: k / 2,
            ..Default::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad_mode(mut self, pad_mode: PadMode) -> Self {
        self.pad_mode = pad_mode;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    mode: PadMode,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn taps(&self) -> usize {
        self.kh * self.kw
    }
    fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate along an axis of length `len`, or `None` for a zero tap.
    #[inline]
    fn src(&self, o: usize, kk: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        if i >= 0 && (i as usize) < len {
            Some(i as usize)
        } else {
            match self.mode {
                PadMode::Zero => None,
                PadMode::Circular => Some(i.rem_euclid(len as isize) as usize),
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Writes patches of channels `c0..c0+nc` into `cols` as `[nc·kh·kw, ho·wo]`.
fn im2col<T: Float>(x: &[T], g: &Geometry, c0: usize, nc: usize, cols: &mut [T]) {
    let p = g.out_px();
    for c in 0..nc {
        let plane = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kx, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back onto channels `c0..c0+nc` of `dx`.
fn col2im<T: Float>(cols: &[T], g: &Geometry, c0: usize, nc: usize, dx: &mut [T]) {
    let p = g.out_px();
    for c in 0..nc {
        let plane = &mut dx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Float>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let p = g.out_px();
    let mut out = vec![T::zero(); g.cout * p];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dst = &mut out[c * p..(c + 1) * p];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let wv = w[(c * g.kh + ky) * g.kw + kx];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[oy * g.wo + ox] += wv * plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    macs::record((g.cout * g.taps() * p) as u64);
    out
}

fn depthwise_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Geometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_px();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let gy = &dy[c * p..(c + 1) * p];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let widx = (c * g.kh + ky) * g.kw + kx;
                let wv = w[widx];
                let mut acc = T::zero();
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            let gv = gy[oy * g.wo + ox];
                            acc += gv * plane[iy * g.w + ix];
                            if let Some(dx) = dx.as_mut() {
                                dx[c * g.h * g.w + iy * g.w + ix] += gv * wv;
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw)
}

fn grouped_forward<T: Float>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let p = g.out_px();
    let kdim = g.cin_g() * g.taps();
    let mut out = vec![T::zero(); g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    for gi in 0..g.groups {
        let c0 = gi * g.cin_g();
        let wg = &w[gi * g.cout_g() * kdim..(gi + 1) * g.cout_g() * kdim];
        let dst = &mut out[gi * g.cout_g() * p..(gi + 1) * g.cout_g() * p];
        if g.is_pointwise() {
            let xs = &x[c0 * p..(c0 + g.cin_g()) * p];
            gemm(g.cout_g(), kdim, p, wg, false, xs, false, dst, false);
        } else {
            im2col(x, g, c0, g.cin_g(), &mut cols);
            gemm(g.cout_g(), kdim, p, wg, false, &cols, false, dst, false);
        }
    }
    out
}

fn grouped_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Geometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_px();
    let kdim = g.cin_g() * g.taps();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); kdim * p];
    for gi in 0..g.groups {
        let c0 = gi * g.cin_g();
        let wg = &w[gi * g.cout_g() * kdim..(gi + 1) * g.cout_g() * kdim];
        let gy = &dy[gi * g.cout_g() * p..(gi + 1) * g.cout_g() * p];
        if let Some(dw) = dw.as_mut() {
            let dwg = &mut dw[gi * g.cout_g() * kdim..(gi + 1) * g.cout_g() * kdim];
            if g.is_pointwise() {
                let xs = &x[c0 * p..(c0 + g.cin_g()) * p];
                gemm(g.cout_g(), p, kdim, gy, false, xs, true, dwg, false);
            } else {
                im2col(x, g, c0, g.cin_g(), &mut cols);
                gemm(g.cout_g(), p, kdim, gy, false, &cols, true, dwg, false);
            }
        }
        if let Some(dx) = dx.as_mut() {
            if g.is_pointwise() {
                let dxs = &mut dx[c0 * p..(c0 + g.cin_g()) * p];
                gemm(kdim, g.cout_g(), p, wg, true, gy, false, dxs, false);
            } else {
                gemm(kdim, g.cout_g(), p, wg, true, gy, false, &mut cols, false);
                col2im(&cols, g, c0, g.cin_g(), dx);
            }
        }
    }
    (dx, dw)
}

impl<T: Float> Tensor<T> {
    /// 2-D cross-correlation of `[cin, H, W]` with `[cout, cin/groups, kh, kw]`.
    ///
    /// `groups == cin` gives a depthwise convolution, a 1×1 kernel a pointwise one.
    pub fn conv2d(&self, weight: &Tensor<T>, opts: Conv2dOpts) -> Result<Tensor<T>> {
        let (cin, h, w) = match *self.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be [c, h, w], got {:?}", self.shape()),
                ))
            }
        };
        let (cout, cin_g, kh, kw) = match *weight.shape() {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be [o, i, kh, kw], got {:?}", weight.shape()),
                ))
            }
        };
        let groups = opts.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} and weight {:?} incompatible with {groups} groups",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        if opts.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if opts.pad_mode == PadMode::Circular && (opts.pad > h || opts.pad > w) {
            return Err(Error::shape("conv2d", "circular padding wider than the input"));
        }
        let ho = out_extent(h, kh, opts.stride, opts.pad);
        let wo = out_extent(w, kw, opts.stride, opts.pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "non-integral output extent for {h}x{w}, kernel {kh}x{kw}, stride {}, pad {}",
                    opts.stride, opts.pad
                ),
            ));
        };
        let geo = Geometry {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride: opts.stride,
            pad: opts.pad,
            groups,
            mode: opts.pad_mode,
        };
        let out = {
            let x = self.data();
            let wt = weight.data();
            if geo.is_depthwise() {
                depthwise_forward(&x, &wt, &geo)
            } else {
                grouped_forward(&x, &wt, &geo)
            }
        };
        Ok(Tensor::from_op(
            vec![cout, ho, wo],
            out,
            "conv2d",
            vec![self.clone(), weight.clone()],
            move |g, _, inp| {
                let x = inp[0].data();
                let wt = inp[1].data();
                let (dx, dw) = if geo.is_depthwise() {
                    depthwise_backward(&x, &wt, g, &geo, inp[0].requires_grad(), inp[1].requires_grad())
                } else {
                    grouped_backward(&x, &wt, g, &geo, inp[0].requires_grad(), inp[1].requires_grad())
                };
                vec![dx, dw]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // Direct nested-loop definition with zero padding.
    fn loop_conv(
        x: &[f64],
        (cin, h, w): (usize, usize, usize),
        wt: &[f64],
        (cout, k): (usize, usize),
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            let gi = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        let c = gi * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * cin_g + ci) * k + ky) * k + kx]
                                    * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f32>::from_vec(&[1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&w, Conv2dOpts::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        let x = Tensor::<f32>::full(&[1, 5, 5], 2.5).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0 / 9.0).unwrap();
        let y = x.conv2d(&w, Conv2dOpts::default()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.to_vec().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn random_input_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cout, k, stride, pad, groups) in &[
            (3, 3, 1, 1, 1),
            (4, 3, 1, 0, 2),
            (2, 2, 2, 0, 1),
            (2, 3, 1, 1, 2),
            (5, 1, 1, 0, 1),
        ] {
            let xs = rand_vec(&mut rng, 2 * 4 * 4);
            let ws = rand_vec(&mut rng, cout * (2 / groups) * k * k);
            let x = Tensor::<f64>::from_vec(&[2, 4, 4], xs.clone()).unwrap();
            let w = Tensor::<f64>::from_vec(&[cout, 2 / groups, k, k], ws.clone()).unwrap();
            let opts = Conv2dOpts {
                stride,
                pad,
                groups,
                pad_mode: PadMode::Zero,
            };
            let got = x.conv2d(&w, opts).unwrap().to_vec();
            let want = loop_conv(&xs, (2, 4, 4), &ws, (cout, k), stride, pad, groups);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn depthwise_equals_independent_single_channel_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let xs = rand_vec(&mut rng, d * 5 * 5);
        let ws = rand_vec(&mut rng, d * 9);
        let x = Tensor::<f64>::from_vec(&[d, 5, 5], xs.clone()).unwrap();
        let w = Tensor::<f64>::from_vec(&[d, 1, 3, 3], ws.clone()).unwrap();
        let y = x.conv2d(&w, Conv2dOpts::same(3).with_groups(d)).unwrap().to_vec();
        for c in 0..d {
            let xc = Tensor::<f64>::from_vec(&[1, 5, 5], xs[c * 25..(c + 1) * 25].to_vec()).unwrap();
            let wc = Tensor::<f64>::from_vec(&[1, 1, 3, 3], ws[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let yc = xc.conv2d(&wc, Conv2dOpts::same(3)).unwrap().to_vec();
            assert_eq!(&y[c * 25..(c + 1) * 25], yc.as_slice());
        }
    }

    #[test]
    fn non_integral_extent_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 5, 5]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        let err = x.conv2d(&w, Conv2dOpts::default().with_stride(2)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn circular_padding_wraps() {
        // 1x3 row [1, 2, 3], kernel [1, 0, 0] picks the left neighbour.
        let x = Tensor::<f64>::from_vec(&[1, 1, 3], vec![1., 2., 3.]).unwrap();
        let w = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![1., 0., 0.]).unwrap();
        let opts = Conv2dOpts {
            pad: 1,
            ..Default::default()
        };
        // pad applies to both axes; height 1 + 2 - 1 = 2 rows of output
        let y = x.conv2d(&w, opts.with_pad_mode(PadMode::Circular)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        let v = y.to_vec();
        assert_eq!(&v[3..6], &[3., 1., 2.]);
    }
}
