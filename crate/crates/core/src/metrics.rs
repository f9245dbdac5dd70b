//! Overlap and boundary-distance metrics on hard label maps, plus the CSV
//! report written by evaluation.
//!
//! Report format: header `case_id,class,dsc,hd95`, one row per case and
//! foreground class. An undefined HD95 (either mask empty) is written `inf`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labels::LabelMap;

pub const REPORT_HEADER: &str = "case_id,class,dsc,hd95";

fn same_shape(op: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            op,
            format!("{}×{} vs {}×{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

/// Dice coefficient of two boolean masks. Both empty gives 1, exactly one
/// empty gives 0.
pub fn dsc_masks(p: &[bool], g: &[bool]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|v| **v).count() + g.iter().filter(|v| **v).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    same_shape("dsc", pred, gt)?;
    Ok(dsc_masks(&pred.mask(class), &gt.mask(class)))
}

/// Foreground pixels with a 4-neighbour outside the mask. Pixels beyond the
/// image border count as outside.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            mask[p] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Squared distance transform along one line, `out[p] = min_q f[q] + (s(p-q))²`.
/// Lower envelope of parabolas; infinite entries are excluded.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + s2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let fr = f[r] + s2 * (r * r) as f64;
                    let cut = (fq - fr) / (2.0 * s2 * (q - r) as f64);
                    if cut <= z[z.len() - 1] {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cut);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = s * (p as f64 - v[k] as f64);
        *o = f[v[k]] + d * d;
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel of
/// `features`, with per-axis spacing `(sy, sx)`.
pub fn distance_transform(features: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let mut g: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        edt_1d(&col, spacing.0, &mut tmp);
        for y in 0..h {
            g[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&g[y * w..(y + 1) * w], spacing.1, &mut row);
        g[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    g.iter_mut().for_each(|v| *v = v.sqrt());
    g
}

/// Linear-interpolation percentile at rank `q·(n−1)` of an unsorted sample.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions, in physical units. `+∞` when either mask is empty.
pub fn hd95_masks(p: &[bool], g: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> f64 {
    if !p.iter().any(|&v| v) || !g.iter().any(|&v| v) {
        return f64::INFINITY;
    }
    let (bp, bg) = (boundary(p, h, w), boundary(g, h, w));
    let (dp, dg) = (distance_transform(&bp, h, w, spacing), distance_transform(&bg, h, w, spacing));
    let mut pooled: Vec<f64> = (0..h * w)
        .filter_map(|i| bp[i].then_some(dg[i]))
        .chain((0..h * w).filter_map(|i| bg[i].then_some(dp[i])))
        .collect();
    percentile(&mut pooled, 0.95)
}

pub fn hd95(pred: &LabelMap, gt: &LabelMap, class: u8, spacing: (f64, f64)) -> Result<f64> {
    same_shape("hd95", pred, gt)?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::Data(format!("spacing {spacing:?} must be positive")));
    }
    Ok(hd95_masks(&pred.mask(class), &gt.mask(class), pred.height, pred.width, spacing))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub case_id: String,
    pub class: u8,
    pub dsc: f64,
    pub hd95: f64,
}

/// Records for each foreground class `1..classes`.
pub fn evaluate_case(case_id: &str, pred: &LabelMap, gt: &LabelMap, classes: usize, spacing: (f64, f64)) -> Result<Vec<MetricRecord>> {
    (1..classes as u8)
        .map(|c| {
            Ok(MetricRecord {
                case_id: case_id.to_string(),
                class: c,
                dsc: dsc(pred, gt, c)?,
                hd95: hd95(pred, gt, c, spacing)?,
            })
        })
        .collect()
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

pub fn report_csv(records: &[MetricRecord]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.case_id, r.class, fmt_metric(r.dsc), fmt_metric(r.hd95)));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub class: u8,
    pub cases: usize,
    pub mean_dsc: f64,
    /// Mean over cases with a finite HD95; NaN if there are none.
    pub mean_hd95: f64,
    pub undefined_hd95: usize,
}

pub fn summarize(records: &[MetricRecord]) -> Vec<ClassSummary> {
    let mut by_class: BTreeMap<u8, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class).or_default().push(r);
    }
    by_class
        .into_iter()
        .map(|(class, rs)| {
            let finite: Vec<f64> = rs.iter().map(|r| r.hd95).filter(|v| v.is_finite()).collect();
            ClassSummary {
                class,
                cases: rs.len(),
                mean_dsc: rs.iter().map(|r| r.dsc).sum::<f64>() / rs.len() as f64,
                mean_hd95: if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 },
                undefined_hd95: rs.len() - finite.len(),
            }
        })
        .collect()
}

/// Mean DSC over all records, the scalar used for validation.
pub fn mean_dsc(records: &[MetricRecord]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    records.iter().map(|r| r.dsc).sum::<f64>() / records.len() as f64
}

pub fn summary_csv(summary: &[ClassSummary]) -> String {
    let mut out = String::from("class,cases,mean_dsc,mean_hd95,undefined_hd95\n");
    for s in summary {
        out.push_str(&format!("{},{},{},{},{}\n", s.class, s.cases, s.mean_dsc, s.mean_hd95, s.undefined_hd95));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_hd95(p: &[bool], g: &[bool], h: usize, w: usize, s: (f64, f64)) -> f64 {
        let (bp, bg) = (boundary(p, h, w), boundary(g, h, w));
        let pts = |b: &[bool]| (0..h * w).filter(|&i| b[i]).map(|i| (i / w, i % w)).collect::<Vec<_>>();
        let (pp, pg) = (pts(&bp), pts(&bg));
        let d = |a: (usize, usize), b: (usize, usize)| {
            let dy = (a.0 as f64 - b.0 as f64) * s.0;
            let dx = (a.1 as f64 - b.1 as f64) * s.1;
            (dy * dy + dx * dx).sqrt()
        };
        let mut all = Vec::new();
        for &a in &pp {
            all.push(pg.iter().map(|&b| d(a, b)).fold(f64::INFINITY, f64::min));
        }
        for &b in &pg {
            all.push(pp.iter().map(|&a| d(a, b)).fold(f64::INFINITY, f64::min));
        }
        percentile(&mut all, 0.95)
    }

    #[test]
    fn dsc_hand_counts() {
        let g = LabelMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(dsc(&g, &g, 1).unwrap(), 1.0);
        let p = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dsc(&p, &g, 1).unwrap(), 0.0);
        let p = LabelMap::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(dsc(&p, &g, 1).unwrap(), 0.5);
        assert_eq!(dsc(&p, &g, 2).unwrap(), 1.0);
        assert!(dsc(&p, &LabelMap::filled(2, 2, 0), 1).is_err());
    }

    #[test]
    fn hd95_single_voxels_and_identity() {
        let mut a = vec![0u8; 64];
        let mut b = vec![0u8; 64];
        a[8 + 1] = 1;
        b[5 * 8 + 4] = 1; // offset (4, 3)
        let (a, b) = (LabelMap::new(8, 8, a).unwrap(), LabelMap::new(8, 8, b).unwrap());
        assert!((hd95(&a, &b, 1, (1.0, 1.0)).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(hd95(&a, &a, 1, (1.0, 1.0)).unwrap(), 0.0);
        assert!((hd95(&a, &b, 1, (2.0, 1.0)).unwrap() - 73f64.sqrt()).abs() < 1e-12);
        assert_eq!(hd95(&a, &LabelMap::filled(8, 8, 0), 1, (1.0, 1.0)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            let f: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.15)).collect();
            let s = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let got = distance_transform(&f, h, w, s);
            for p in 0..h * w {
                let want = (0..h * w)
                    .filter(|&q| f[q])
                    .map(|q| {
                        let dy = ((p / w) as f64 - (q / w) as f64) * s.0;
                        let dx = ((p % w) as f64 - (q % w) as f64) * s.1;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(got[p] == want || (got[p] - want).abs() < 1e-12, "{} vs {want}", got[p]);
            }
        }
    }

    #[test]
    fn hd95_matches_all_pairs_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let p: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
            let g: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
            if !p.contains(&true) || !g.contains(&true) {
                continue;
            }
            let s = (1.0, 1.5);
            let got = hd95_masks(&p, &g, 8, 8, s);
            assert!((got - brute_hd95(&p, &g, 8, 8, s)).abs() < 1e-9);
            assert_eq!(got, hd95_masks(&g, &p, 8, 8, s));
            let d = dsc_masks(&p, &g);
            assert!((0.0..=1.0).contains(&d) && d == dsc_masks(&g, &p));
        }
    }

    #[test]
    fn boundary_treats_border_as_outside() {
        let b = boundary(&[true; 9], 3, 3);
        assert_eq!(b.iter().filter(|v| !**v).count(), 1);
        assert!(!b[4]);
    }

    #[test]
    fn report_and_summary() {
        let recs = vec![
            MetricRecord { case_id: "a".into(), class: 1, dsc: 1.0, hd95: 0.0 },
            MetricRecord { case_id: "b".into(), class: 1, dsc: 0.5, hd95: f64::INFINITY },
        ];
        let csv = report_csv(&recs);
        assert_eq!(csv, "case_id,class,dsc,hd95\na,1,1,0\nb,1,0.5,inf\n");
        let s = summarize(&recs);
        assert_eq!(s[0].mean_dsc, 0.75);
        assert_eq!(s[0].mean_hd95, 0.0);
        assert_eq!(s[0].undefined_hd95, 1);
        assert_eq!(mean_dsc(&recs), 0.75);
    }
}
