//! Half-overlapping sliding-window inference with probability averaging.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{no_grad, Float, Tensor};

/// Anything that maps a `[C_in, h, w]` window to `[K, h, w]` class logits.
pub trait Segmenter<T: Float> {
    fn num_classes(&self) -> usize;
    fn logits(&self, window: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Float> Segmenter<T> for Model<T> {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn logits(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(window)?.logits)
    }
}

/// Window origins along one axis: stride `window/2`, with the last window
/// snapped so it ends at the image edge.
pub fn window_starts(extent: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || window > extent {
        return Err(Error::Data(format!("window {window} does not fit extent {extent}")));
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + window < extent).collect();
    starts.push(extent - window);
    Ok(starts)
}

/// Averages per-window outputs over every placement covering each pixel.
/// With `softmax` the class probabilities are averaged, otherwise raw logits.
pub fn sliding_window_infer<T: Float, S: Segmenter<T>>(
    model: &S,
    image: &Tensor<T>,
    window: (usize, usize),
    softmax: bool,
) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("sliding_window_infer", format!("image {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let ys = window_starts(h, window.0)?;
    let xs = window_starts(w, window.1)?;
    let k = model.num_classes();
    let (wh, ww) = window;
    let _g = no_grad();
    let mut acc = vec![0.0f64; k * h * w];
    let mut cover = vec![0u32; h * w];
    let img = image.to_vec();
    for &y0 in &ys {
        for &x0 in &xs {
            let mut patch = Vec::with_capacity(c * wh * ww);
            for ch in 0..c {
                for y in y0..y0 + wh {
                    let row = ch * h * w + y * w;
                    patch.extend_from_slice(&img[row + x0..row + x0 + ww]);
                }
            }
            let mut out = model.logits(&Tensor::from_vec(&[c, wh, ww], patch)?)?;
            if out.shape() != [k, wh, ww] {
                return Err(Error::shape(
                    "sliding_window_infer",
                    format!("model returned {:?} for a {wh}×{ww} window", out.shape()),
                ));
            }
            if softmax {
                out = out.softmax(0)?;
            }
            let o = out.data();
            for cls in 0..k {
                for y in 0..wh {
                    for x in 0..ww {
                        acc[cls * h * w + (y0 + y) * w + x0 + x] += o[cls * wh * ww + y * ww + x].as_f64();
                    }
                }
            }
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    cover[y * w + x] += 1;
                }
            }
        }
    }
    debug_assert!(cover.iter().all(|&n| n >= 1));
    let out = acc.iter().enumerate().map(|(i, &v)| T::of(v / cover[i % (h * w)] as f64)).collect();
    Tensor::from_vec(&[k, h, w], out)
}
