//! Seeded synthetic segmentation task: blurred bright shapes over a
//! textured, noisy background. Labels are the exact generator shapes.

use rand::Rng;
use rand_distr::Normal;

use super::sample::SegSample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

const TEXTURE_AMPLITUDE: f64 = 0.15;
const NOISE_STD: f64 = 0.1;
const SHAPES_PER_CLASS: std::ops::RangeInclusive<usize> = 1..=2;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let ry = rng.random_range(hf / 10.0..=hf / 5.0);
        let rx = rng.random_range(wf / 10.0..=wf / 5.0);
        let cy = rng.random_range(ry..=hf - 1.0 - ry);
        let cx = rng.random_range(rx..=wf - 1.0 - rx);
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx }
        } else {
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

fn box_blur3(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += img[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            acc / n
        })
        .collect()
}

fn one_sample<R: Rng>(rng: &mut R, idx: usize, h: usize, w: usize, classes: usize) -> Result<SegSample> {
    let mut labels = vec![0u8; h * w];
    for c in 1..classes {
        for _ in 0..rng.random_range(SHAPES_PER_CLASS) {
            let s = Shape::random(rng, h, w);
            for (p, l) in labels.iter_mut().enumerate() {
                if s.contains((p / w) as f64, (p % w) as f64) {
                    *l = c as u8;
                }
            }
        }
    }
    let level = |l: u8| if l == 0 { 0.0 } else { l as f64 / (classes - 1) as f64 };
    let fg = box_blur3(&labels.iter().map(|&l| level(l)).collect::<Vec<_>>(), h, w);
    let (fy, fx) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    let (py, px) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let noise = Normal::new(0.0, NOISE_STD).expect("finite σ");
    let image = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let tex = TEXTURE_AMPLITUDE * (fy * y + py).sin() * (fx * x + px).cos();
            (fg[p] + tex + rng.sample(noise)) as f32
        })
        .collect();
    SegSample::new(format!("case{idx:04}"), 1, image, LabelMap::new(h, w, labels)?, (1.0, 1.0))
}

/// `n` single-channel samples of size `h×w` with classes `0..classes`.
/// Every sample contains at least one shape of each foreground class.
pub fn synth_task<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize, classes: usize) -> Result<Vec<SegSample>> {
    if !(2..=256).contains(&classes) || h < 8 || w < 8 {
        return Err(Error::Data(format!(
            "synth_task needs 2..=256 classes and at least 8×8 pixels, got {classes} classes at {h}×{w}"
        )));
    }
    (0..n).map(|i| one_sample(rng, i, h, w, classes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn draw_covers_all_classes_with_requested_extents() {
        let s = synth_task(&mut ChaCha8Rng::seed_from_u64(0), 64, 32, 24, 4).unwrap();
        let mut seen = BTreeSet::new();
        for x in &s {
            assert_eq!((x.height(), x.width(), x.image.len()), (32, 24, 32 * 24));
            seen.extend(x.label.data.iter().copied());
        }
        assert_eq!(seen, (0..4).collect());
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let a = synth_task(&mut ChaCha8Rng::seed_from_u64(9), 4, 16, 16, 2).unwrap();
        let b = synth_task(&mut ChaCha8Rng::seed_from_u64(9), 4, 16, 16, 2).unwrap();
        let bits = |v: &[SegSample]| v.iter().flat_map(|s| s.image.iter().map(|f| f.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        let c = synth_task(&mut ChaCha8Rng::seed_from_u64(10), 4, 16, 16, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn foreground_is_brighter_on_average() {
        let s = synth_task(&mut ChaCha8Rng::seed_from_u64(1), 8, 32, 32, 2).unwrap();
        for x in &s {
            let mean = |c: u8| {
                let v: Vec<f64> = (0..x.label.len()).filter(|&i| x.label.data[i] == c).map(|i| x.image[i] as f64).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!(mean(1) > mean(0) + 0.5);
        }
    }
}
