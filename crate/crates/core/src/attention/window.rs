//! Window attention, forward only; used as a cost reference by the bench.

use super::{attend, AttnConfig, MhsaWeights};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const MASKED: f64 = -1e9;

/// Token indices (row-major over the map) of each window, after a cyclic shift
/// by `shift` in both axes. Windows are listed row-major.
fn window_indices(h: usize, w: usize, m: usize, shift: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity((h / m) * (w / m));
    for wy in 0..h / m {
        for wx in 0..w / m {
            let mut idx = Vec::with_capacity(m * m);
            for y in 0..m {
                for x in 0..m {
                    let oy = (wy * m + y + shift) % h;
                    let ox = (wx * m + x + shift) % w;
                    idx.push(oy * w + ox);
                }
            }
            out.push(idx);
        }
    }
    out
}

fn check_window(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::shape(
            "window_mhsa",
            format!("{h}×{w} map not divisible into {m}×{m} windows"),
        ));
    }
    Ok(())
}

/// Additive masks `[m², m²]` per window for the shifted partition of an `h×w`
/// map (shift `m/2`): tokens from different regions of the rolled map may not
/// attend to each other.
pub fn shifted_window_mask<T: Float>(h: usize, w: usize, m: usize) -> Result<Vec<Tensor<T>>> {
    check_window(h, w, m)?;
    let s = m / 2;
    let region = |i: usize, len: usize| -> usize {
        if s == 0 || i < len - m {
            0
        } else if i < len - s {
            1
        } else {
            2
        }
    };
    let mut masks = Vec::new();
    for wy in 0..h / m {
        for wx in 0..w / m {
            let labels: Vec<usize> = (0..m * m)
                .map(|t| {
                    let (y, x) = (wy * m + t / m, wx * m + t % m);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            let data = (0..m * m * m * m)
                .map(|i| {
                    if labels[i / (m * m)] == labels[i % (m * m)] {
                        T::zero()
                    } else {
                        T::of(MASKED)
                    }
                })
                .collect();
            masks.push(Tensor::from_vec(&[m * m, m * m], data)?);
        }
    }
    Ok(masks)
}

fn windowed<T: Float>(
    x: &Tensor<T>,
    w: &MhsaWeights<T>,
    m: usize,
    cfg: &AttnConfig,
    shifted: bool,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (hh, ww) = (x.shape()[1], x.shape()[2]);
    check_window(hh, ww, m)?;
    let shift = if shifted { m / 2 } else { 0 };
    let q = w.q.project_cf(x)?;
    let k = w.k.project_cf(x)?;
    let v = w.v.project_cf(x)?;
    let windows = window_indices(hh, ww, m, shift);
    let masks = if shift > 0 {
        Some(shifted_window_mask::<T>(hh, ww, m)?)
    } else {
        None
    };
    let mut outs = Vec::with_capacity(windows.len());
    for (i, idx) in windows.iter().enumerate() {
        let mask = masks.as_ref().map(|ms| &ms[i]);
        let a = attend(
            &q.select_columns(idx)?,
            &k.select_columns(idx)?,
            &v.select_columns(idx)?,
            cfg.n_heads,
            mask,
        )?;
        outs.push(a.out);
    }
    // back to raster order
    let order: Vec<usize> = windows.concat();
    let mut inverse = vec![0; order.len()];
    for (pos, &tok) in order.iter().enumerate() {
        inverse[tok] = pos;
    }
    Tensor::concat(&outs, 1)?.select_columns(&inverse)?.reshape(x.shape())
}

/// Dense attention inside non-overlapping `m×m` windows, before the output
/// projection.
pub fn window_mhsa_forward<T: Float>(x: &Tensor<T>, w: &MhsaWeights<T>, m: usize, cfg: &AttnConfig) -> Result<Tensor<T>> {
    windowed(x, w, m, cfg, false)
}

/// The shifted-window counterpart (cyclic shift by `m/2` plus region masks).
pub fn shifted_window_mhsa_forward<T: Float>(
    x: &Tensor<T>,
    w: &MhsaWeights<T>,
    m: usize,
    cfg: &AttnConfig,
) -> Result<Tensor<T>> {
    windowed(x, w, m, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_mhsa;
    use crate::attention::test_util::*;

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn whole_map_window_equals_dense() {
        let cfg = AttnConfig::new(4, 2, (1, 1));
        let (w, _s) = build(1, |pb| MhsaWeights::new(pb, &cfg, false));
        let x = random_map(2, &[4, 4, 4]);
        let a = window_mhsa_forward(&x, &w, 4, &cfg).unwrap();
        assert!(a.max_abs_diff(&dense_mhsa(&x, &w, &cfg).unwrap()) < 1e-12);
    }

    #[test]
    fn unit_window_returns_values() {
        let cfg = AttnConfig::new(4, 2, (1, 1));
        let (w, _s) = build(3, |pb| MhsaWeights::new(pb, &cfg, false));
        let x = random_map(4, &[4, 4, 4]);
        let a = window_mhsa_forward(&x, &w, 1, &cfg).unwrap();
        assert!(a.max_abs_diff(&w.v.forward_map(&x).unwrap()) < 1e-12);
    }

    fn gather(seq: &[f64], n: usize, idx: &[usize]) -> Vec<f64> {
        let d = seq.len() / n;
        (0..d).flat_map(|c| idx.iter().map(move |&j| seq[c * n + j])).collect()
    }

    #[test]
    fn matches_per_window_oracle() {
        let cfg = AttnConfig::new(4, 2, (1, 1));
        let (w, _s) = build(5, |pb| MhsaWeights::new(pb, &cfg, false));
        let x = random_map(6, &[4, 4, 4]);
        let got = window_mhsa_forward(&x, &w, 2, &cfg).unwrap().to_vec();
        let q = w.q.project_cf(&x).unwrap().to_vec();
        let k = w.k.project_cf(&x).unwrap().to_vec();
        let v = w.v.project_cf(&x).unwrap().to_vec();
        let mut want = vec![0.0; 64];
        for (wy, wx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            let idx: Vec<usize> = (0..4).map(|t| (wy + t / 2) * 4 + wx + t % 2).collect();
            let o = naive_attention(&gather(&q, 16, &idx), &gather(&k, 16, &idx), &gather(&v, 16, &idx), 4, 4, 4, 2);
            for c in 0..4 {
                for (t, &j) in idx.iter().enumerate() {
                    want[c * 16 + j] = o[c * 4 + t];
                }
            }
        }
        assert!(max_diff(&got, &want) < 1e-6);
    }

    #[test]
    fn shifted_windows_match_neighbourhood_oracle() {
        // In original coordinates a token sees exactly the tokens that share its
        // shifted window and its region of the rolled map.
        let (h, m) = (4, 2);
        let cfg = AttnConfig::new(2, 1, (1, 1));
        let (w, _s) = build(7, |pb| MhsaWeights::new(pb, &cfg, false));
        let x = random_map(8, &[2, h, h]);
        let got = shifted_window_mhsa_forward(&x, &w, m, &cfg).unwrap().to_vec();
        let q = w.q.project_cf(&x).unwrap().to_vec();
        let k = w.k.project_cf(&x).unwrap().to_vec();
        let v = w.v.project_cf(&x).unwrap().to_vec();
        let rolled = |t: usize| ((t / h + h - 1) % h, (t % h + h - 1) % h);
        let region = |i: usize| if i < h - m { 0 } else if i < h - 1 { 1 } else { 2 };
        let key = |t: usize| {
            let (y, x) = rolled(t);
            (y / m, x / m, region(y), region(x))
        };
        for i in 0..h * h {
            let idx: Vec<usize> = (0..h * h).filter(|&j| key(j) == key(i)).collect();
            let o = naive_attention(&gather(&q, 16, &[i]), &gather(&k, 16, &idx), &gather(&v, 16, &idx), 2, 1, idx.len(), 1);
            for c in 0..2 {
                assert!((got[c * 16 + i] - o[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masks_are_symmetric_with_open_diagonal() {
        for mask in shifted_window_mask::<f64>(8, 8, 4).unwrap() {
            let v = mask.to_vec();
            for i in 0..16 {
                assert_eq!(v[i * 16 + i], 0.0);
                for j in 0..16 {
                    assert_eq!(v[i * 16 + j], v[j * 16 + i]);
                }
            }
        }
    }

    #[test]
    fn indivisible_window_is_rejected() {
        let cfg = AttnConfig::new(4, 2, (1, 1));
        let (w, _s) = build(9, |pb| MhsaWeights::new(pb, &cfg, false));
        let err = window_mhsa_forward(&random_map(1, &[4, 6, 6]), &w, 4, &cfg).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
