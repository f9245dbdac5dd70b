//! On-the-fly training augmentation.
//!
//! Each transform fires independently with its probability; crop always
//! runs. Geometric transforms resample the label by nearest neighbour and
//! never touch label values; photometric ones change only the image.

use rand::Rng;

use super::sample::{bilinear_at, SegSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f64,
    pub p_scale: f64,
    pub scale_range: (f64, f64),
    pub p_brightness: f64,
    /// Additive shift drawn from `±max_brightness`.
    pub max_brightness: f64,
    pub p_contrast: f64,
    /// Multiplier about the image mean.
    pub contrast_range: (f64, f64),
    pub p_noise: f64,
    /// Noise σ is drawn uniformly from `[0, max_noise_std]`.
    pub max_noise_std: f64,
    /// Crop extent; `None` keeps the full image (the crop is then a no-op).
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_rotate: 0.5,
            max_rotation_deg: 30.0,
            p_scale: 0.5,
            scale_range: (0.85, 1.25),
            p_brightness: 0.5,
            max_brightness: 0.1,
            p_contrast: 0.5,
            contrast_range: (0.9, 1.1),
            p_noise: 0.5,
            max_noise_std: 0.05,
            crop: None,
        }
    }
}

/// Rotation by `angle` radians and zoom by `scale` about the image centre.
/// Pixels mapped from outside the image get intensity 0 and label 0.
pub fn rotate_scale(s: &SegSample, angle: f64, scale: f64) -> SegSample {
    let (h, w) = (s.height(), s.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    // inverse map from output to input coordinates
    let src = |y: usize, x: usize| {
        let (dy, dx) = ((y as f64 - cy) / scale, (x as f64 - cx) / scale);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    };
    let inside = |u: f64, n: usize| u > -0.5 && u < n as f64 - 0.5;
    let mut image = vec![0.0f32; s.image.len()];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            if !(inside(sy, h) && inside(sx, w)) {
                continue;
            }
            for c in 0..s.channels {
                image[c * h * w + y * w + x] = bilinear_at(&s.image[c * h * w..(c + 1) * h * w], h, w, sy, sx);
            }
            labels[y * w + x] = s.label.at((sy.round() as usize).min(h - 1), (sx.round() as usize).min(w - 1));
        }
    }
    SegSample {
        image,
        label: LabelMap {
            height: h,
            width: w,
            data: labels,
        },
        ..s.clone()
    }
}

pub fn crop(s: &SegSample, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<SegSample> {
    let (h, w) = (s.height(), s.width());
    if ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w {
        return Err(Error::Data(format!(
            "crop {ch}×{cw} at ({y0}, {x0}) does not fit {h}×{w}"
        )));
    }
    let mut image = Vec::with_capacity(s.channels * ch * cw);
    for c in 0..s.channels {
        for y in y0..y0 + ch {
            let row = c * h * w + y * w;
            image.extend_from_slice(&s.image[row + x0..row + x0 + cw]);
        }
    }
    let labels = (y0..y0 + ch).flat_map(|y| s.label.data[y * w + x0..y * w + x0 + cw].iter().copied()).collect();
    SegSample::new(s.id.clone(), s.channels, image, LabelMap::new(ch, cw, labels)?, s.spacing)
}

pub fn augment<R: Rng>(s: &SegSample, cfg: &AugmentConfig, rng: &mut R) -> Result<SegSample> {
    let (ch, cw) = cfg.crop.unwrap_or((s.height(), s.width()));
    if ch > s.height() || cw > s.width() {
        return Err(Error::Data(format!(
            "crop {ch}×{cw} is larger than image {}×{}",
            s.height(),
            s.width()
        )));
    }
    // draw every decision up front so the stream consumed is fixed per sample
    let angle = if rng.random_bool(cfg.p_rotate) {
        rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let scale = if rng.random_bool(cfg.p_scale) {
        rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        1.0
    };
    let brightness = if rng.random_bool(cfg.p_brightness) {
        rng.random_range(-cfg.max_brightness..=cfg.max_brightness)
    } else {
        0.0
    };
    let contrast = if rng.random_bool(cfg.p_contrast) {
        rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1)
    } else {
        1.0
    };
    let noise = if rng.random_bool(cfg.p_noise) {
        rng.random_range(0.0..=cfg.max_noise_std)
    } else {
        0.0
    };
    let y0 = rng.random_range(0..=s.height() - ch);
    let x0 = rng.random_range(0..=s.width() - cw);

    let mut out = if angle != 0.0 || scale != 1.0 {
        rotate_scale(s, angle, scale)
    } else {
        s.clone()
    };
    if contrast != 1.0 {
        let mean = out.image.iter().map(|&v| v as f64).sum::<f64>() / out.image.len() as f64;
        out.image.iter_mut().for_each(|v| *v = (mean + (*v as f64 - mean) * contrast) as f32);
    }
    if brightness != 0.0 {
        out.image.iter_mut().for_each(|v| *v += brightness as f32);
    }
    if noise > 0.0 {
        let normal = rand_distr::Normal::new(0.0, noise).expect("finite σ");
        out.image.iter_mut().for_each(|v| *v += rng.sample(normal) as f32);
    }
    crop(&out, y0, x0, ch, cw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sample(seed: u64, h: usize, w: usize) -> SegSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = (0..2 * h * w).map(|_| rng.random()).collect();
        let mut lbl = LabelMap::filled(h, w, 0);
        for y in h / 4..h / 2 {
            for x in w / 4..3 * w / 4 {
                lbl.data[y * w + x] = 1 + (x % 2) as u8;
            }
        }
        SegSample::new("s", 2, img, lbl, (1.0, 1.0)).unwrap()
    }

    #[test]
    fn quarter_turn_is_exact_array_rotation() {
        let s = sample(0, 7, 7);
        let r = rotate_scale(&s, std::f64::consts::FRAC_PI_2, 1.0);
        for c in 0..2 {
            for y in 0..7 {
                for x in 0..7 {
                    // output (y, x) samples input (x, 6 - y)
                    let want = s.image[c * 49 + x * 7 + (6 - y)];
                    assert!((r.image[c * 49 + y * 7 + x] - want).abs() < 1e-5);
                }
            }
        }
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(r.label.at(y, x), s.label.at(x, 6 - y));
            }
        }
    }

    #[test]
    fn seeded_twice_gives_identical_output() {
        let s = sample(1, 16, 16);
        let cfg = AugmentConfig {
            crop: Some((12, 12)),
            ..Default::default()
        };
        for seed in 0..10 {
            let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.height(), a.width()), (12, 12));
        }
    }

    #[test]
    fn geometric_path_keeps_class_set() {
        let s = sample(2, 24, 24);
        let cfg = AugmentConfig {
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_noise: 0.0,
            p_rotate: 1.0,
            p_scale: 1.0,
            ..Default::default()
        };
        let classes = |l: &LabelMap| l.data.iter().copied().collect::<BTreeSet<_>>();
        for seed in 0..20 {
            let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(classes(&a.label), classes(&s.label));
        }
    }

    #[test]
    fn photometric_path_leaves_labels() {
        let s = sample(3, 8, 8);
        let cfg = AugmentConfig {
            p_rotate: 0.0,
            p_scale: 0.0,
            p_brightness: 1.0,
            p_contrast: 1.0,
            p_noise: 1.0,
            ..Default::default()
        };
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.label, s.label);
        assert_ne!(a.image, s.image);
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let s = sample(4, 8, 8);
        let cfg = AugmentConfig {
            crop: Some((9, 4)),
            ..Default::default()
        };
        assert!(augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
