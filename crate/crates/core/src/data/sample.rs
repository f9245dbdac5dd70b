use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Float, Tensor};

/// One image with its label map. `image` is channels-first `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub channels: usize,
    pub image: Vec<f32>,
    pub label: LabelMap,
    /// Physical size of one pixel along (y, x).
    pub spacing: (f64, f64),
}

impl SegSample {
    pub fn new(id: impl Into<String>, channels: usize, image: Vec<f32>, label: LabelMap, spacing: (f64, f64)) -> Result<Self> {
        let s = SegSample {
            id: id.into(),
            channels,
            image,
            label,
            spacing,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.image.len() != self.channels * self.label.len() {
            return Err(Error::Data(format!(
                "case {}: image has {} values for {} channels of {}×{}",
                self.id,
                self.image.len(),
                self.channels,
                self.label.height,
                self.label.width
            )));
        }
        check_spacing(self.spacing)
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn image_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height(), self.width()],
            self.image.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("validated extents")
    }
}

fn check_spacing(s: (f64, f64)) -> Result<()> {
    if s.0 > 0.0 && s.1 > 0.0 && s.0.is_finite() && s.1.is_finite() {
        Ok(())
    } else {
        Err(Error::Data(format!("spacing {s:?} must be positive and finite")))
    }
}

/// Bilinear sample of one channel at fractional `(y, x)`, clamping to the
/// border.
pub(crate) fn bilinear_at(img: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy: usize, xx: usize| img[yy * w + xx] as f64;
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Resamples to `target` spacing. Extents become `round(old · spacing / target)`;
/// pixel centres are aligned in physical space, images are bilinear and
/// labels nearest neighbour.
pub fn resample(sample: &SegSample, target: (f64, f64)) -> Result<SegSample> {
    check_spacing(sample.spacing)?;
    check_spacing(target)?;
    let (h, w) = (sample.height(), sample.width());
    let nh = ((h as f64 * sample.spacing.0 / target.0).round() as usize).max(1);
    let nw = ((w as f64 * sample.spacing.1 / target.1).round() as usize).max(1);
    let (ry, rx) = (target.0 / sample.spacing.0, target.1 / sample.spacing.1);
    let src = |j: usize, r: f64| (j as f64 + 0.5) * r - 0.5;
    let mut image = Vec::with_capacity(sample.channels * nh * nw);
    for c in 0..sample.channels {
        let plane = &sample.image[c * h * w..(c + 1) * h * w];
        for j in 0..nh {
            for i in 0..nw {
                image.push(bilinear_at(plane, h, w, src(j, ry), src(i, rx)));
            }
        }
    }
    let near = |u: f64, n: usize| ((u + 0.5).floor().max(0.0) as usize).min(n - 1);
    let labels = (0..nh * nw)
        .map(|p| sample.label.at(near(src(p / nw, ry), h), near(src(p % nw, rx), w)))
        .collect();
    SegSample::new(sample.id.clone(), sample.channels, image, LabelMap::new(nh, nw, labels)?, target)
}

/// Mean and standard deviation used for intensity normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

impl IntensityStats {
    fn from_values<'a>(vals: impl Iterator<Item = &'a f32> + Clone) -> Option<Self> {
        let n = vals.clone().count();
        if n == 0 {
            return None;
        }
        let mean = vals.clone().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = vals.map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        Some(IntensityStats { mean, std: var.sqrt() })
    }
}

fn foreground_values(s: &SegSample) -> impl Iterator<Item = &f32> + Clone {
    let n = s.label.len();
    s.image.iter().enumerate().filter(move |(i, _)| s.label.data[i % n] > 0).map(|(_, v)| v)
}

/// Statistics over foreground pixels (label > 0) of every sample, falling
/// back to all pixels when no sample has foreground.
pub fn foreground_stats(samples: &[SegSample]) -> IntensityStats {
    let fg = samples.iter().flat_map(foreground_values);
    IntensityStats::from_values(fg)
        .or_else(|| IntensityStats::from_values(samples.iter().flat_map(|s| s.image.iter())))
        .unwrap_or(IntensityStats { mean: 0.0, std: 1.0 })
}

pub fn apply_stats(sample: &SegSample, stats: IntensityStats) -> SegSample {
    let std = stats.std.max(STD_FLOOR);
    let mut out = sample.clone();
    out.image.iter_mut().for_each(|v| *v = ((*v as f64 - stats.mean) / std) as f32);
    out
}

/// Normalises by the sample's own foreground statistics.
pub fn normalize_intensity(sample: &SegSample) -> SegSample {
    apply_stats(sample, foreground_stats(std::slice::from_ref(sample)))
}
