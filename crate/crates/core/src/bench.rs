//! Multiply-accumulate accounting for the attention variants: closed-form
//! leading-term formulas, instrumented counts of the real layers, and
//! log-log scaling fits.
//!
//! Layers measured (single sample, inference mode):
//! - `conv`: one `k×k` convolution `d → d`.
//! - `mhsa`: dense self-attention with 1×1 q/k/v and output projections.
//! - `window`: a window layer followed by its shifted-window partner, each
//!   with 1×1 projections.
//! - `bmha`: bidirectional attention with its projections and both output
//!   projections. Depthwise stages and semantic-side projections are not in
//!   the formula and show up as extra MACs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::attention::{bmha_attention, mhsa_layer, shifted_window_mhsa_forward, window_mhsa_forward, AttnConfig, BmhaWeights, MhsaWeights};
use crate::error::{Error, Result};
use crate::layers::{seeded_store, Conv2d, ParamBuilder};
use crate::tensor::{macs, no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Conv,
    Mhsa,
    Window,
    Bmha,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Conv, Variant::Mhsa, Variant::Window, Variant::Bmha];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Conv => "conv",
            Variant::Mhsa => "mhsa",
            Variant::Window => "window",
            Variant::Bmha => "bmha",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Variant::Conv),
            "mhsa" => Ok(Variant::Mhsa),
            "window" => Ok(Variant::Window),
            "bmha" => Ok(Variant::Bmha),
            _ => Err(Error::config("variant", format!("`{s}` is not one of conv, mhsa, window, bmha"))),
        }
    }
}

/// Layer shape shared by all variants. `m` is the window side and `hw` the
/// semantic token count; each is ignored by variants that do not use it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub k: usize,
    pub heads: usize,
    pub m: usize,
    pub semantic_hw: (usize, usize),
}

impl BenchShape {
    pub fn n(&self) -> usize {
        self.h * self.w
    }
}

/// Leading-term MAC formulas in `(H, W, d, k, M, hw)`:
/// conv `k²HWd²`, mhsa `4HWd² + 2(HW)²d`, window `8HWd² + 4M²HWd`,
/// bmha `3HWd² + 3·hw·HWd`.
pub fn formula_macs(v: Variant, h: u64, w: u64, d: u64, k: u64, m: u64, hw: u64) -> u64 {
    let n = h * w;
    match v {
        Variant::Conv => k * k * n * d * d,
        Variant::Mhsa => 4 * n * d * d + 2 * n * n * d,
        Variant::Window => 8 * n * d * d + 4 * m * m * n * d,
        Variant::Bmha => 3 * n * d * d + 3 * hw * n * d,
    }
}

pub fn formula_for(v: Variant, s: &BenchShape) -> u64 {
    let hw = (s.semantic_hw.0 * s.semantic_hw.1) as u64;
    formula_macs(v, s.h as u64, s.w as u64, s.d as u64, s.k as u64, s.m as u64, hw)
}

/// One execution of a variant's layer.
pub struct Measurement {
    pub macs: u64,
    pub params: usize,
    pub wall_ns: u128,
}

fn input(c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect()).expect("positive extents")
}

pub fn measure(v: Variant, s: &BenchShape) -> Result<Measurement> {
    let (mut store, mut rng) = seeded_store::<f32>(0);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let cfg = AttnConfig {
        k: s.k,
        ..AttnConfig::new(s.d, s.heads, s.semantic_hw)
    };
    let x = input(s.d, s.h, s.w);
    let _g = no_grad();
    let run: Box<dyn Fn() -> Result<()>> = match v {
        Variant::Conv => {
            let conv = Conv2d::same(&mut pb, s.d, s.d, s.k);
            Box::new(move || conv.forward(&x).map(drop))
        }
        Variant::Mhsa => {
            let wts = MhsaWeights::new(&mut pb, &cfg, false);
            Box::new(move || mhsa_layer(&x, &wts, &cfg).map(drop))
        }
        Variant::Window => {
            if s.m == 0 || !s.h.is_multiple_of(s.m) || !s.w.is_multiple_of(s.m) {
                return Err(Error::config("m", format!("window {} must divide {}×{}", s.m, s.h, s.w)));
            }
            let a = MhsaWeights::new(&mut pb.sub("w"), &cfg, false);
            let b = MhsaWeights::new(&mut pb.sub("sw"), &cfg, false);
            let m = s.m;
            Box::new(move || {
                let y = a.out.forward(&window_mhsa_forward(&x, &a, m, &cfg)?)?;
                b.out.forward(&shifted_window_mhsa_forward(&y, &b, m, &cfg)?).map(drop)
            })
        }
        Variant::Bmha => {
            let wts = BmhaWeights::new(&mut pb, &cfg);
            let sem = input(s.d, s.semantic_hw.0, s.semantic_hw.1);
            Box::new(move || {
                let a = bmha_attention(&x, &sem, &wts, &cfg)?;
                wts.x_out.forward(&a.x)?;
                if let (Some(o), Some(mm)) = (&wts.m_out, &a.m) {
                    o.forward(mm)?;
                }
                Ok(())
            })
        }
    };
    let params = store.count();
    let t = Instant::now();
    let (r, macs) = macs::measure(&run);
    r?;
    Ok(Measurement {
        macs,
        params,
        wall_ns: t.elapsed().as_nanos(),
    })
}

pub fn measured_macs(v: Variant, s: &BenchShape) -> Result<u64> {
    Ok(measure(v, s)?.macs)
}

/// Least-squares line through `(ln n, ln macs)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linearity_fit(points: &[(usize, u64)]) -> Result<Fit> {
    if points.len() < 3 {
        return Err(Error::Data(format!("a scaling fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(n, m)| n == 0 || m == 0) {
        return Err(Error::Data("sweep points must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, m)| (m as f64).ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("sweep needs at least two distinct sizes".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(Fit { slope, intercept, r2 })
}

/// Shapes whose token count doubles at every step, from `4×4` up to
/// `max_side×max_side`, alternating which side grows.
pub fn doubling_shapes(base: BenchShape, max_side: usize) -> Vec<BenchShape> {
    let mut out = Vec::new();
    let (mut h, mut w) = (4, 4);
    while h <= max_side && w <= max_side {
        out.push(BenchShape { h, w, ..base });
        if w == h {
            w *= 2;
        } else {
            h *= 2;
        }
    }
    out
}

/// Default sweep configuration: `d = 8`, 2 heads, `k = 3`, 4×4 windows and a
/// 4×4 semantic map.
pub fn default_shape() -> BenchShape {
    BenchShape {
        h: 4,
        w: 4,
        d: 8,
        k: 3,
        heads: 2,
        m: 4,
        semantic_hw: (4, 4),
    }
}

pub fn sweep(v: Variant, shapes: &[BenchShape]) -> Result<Vec<(usize, u64)>> {
    shapes.iter().map(|s| Ok((s.n(), measured_macs(v, s)?))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub shape: BenchShape,
    pub params: usize,
    pub formula_macs: u64,
    pub measured_macs: u64,
    pub wall_ns: u128,
}

impl ReportRow {
    /// MACs outside the formula's terms (negative when the formula over-counts).
    pub fn extra_macs(&self) -> i128 {
        self.measured_macs as i128 - self.formula_macs as i128
    }
}

/// Measures every `(variant, shape)` pair in the given order.
pub fn report(configs: &[(Variant, BenchShape)]) -> Result<Vec<ReportRow>> {
    configs
        .iter()
        .map(|&(variant, shape)| {
            let m = measure(variant, &shape)?;
            Ok(ReportRow {
                variant,
                shape,
                params: m.params,
                formula_macs: formula_for(variant, &shape),
                measured_macs: m.macs,
                wall_ns: m.wall_ns,
            })
        })
        .collect()
}

pub const REPORT_HEADER: &str = "variant,h,w,n,d,k,m,hw,params,formula_macs,measured_macs,extra_macs,ratio,wall_us";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let sh = &r.shape;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{}\n",
            r.variant,
            sh.h,
            sh.w,
            sh.n(),
            sh.d,
            sh.k,
            sh.m,
            sh.semantic_hw.0 * sh.semantic_hw.1,
            r.params,
            r.formula_macs,
            r.measured_macs,
            r.extra_macs(),
            r.measured_macs as f64 / r.formula_macs as f64,
            r.wall_ns / 1000
        ));
    }
    s
}

/// Aligned plain-text version of the report.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<7} {:>9} {:>8} {:>14} {:>14} {:>7} {:>10}\n",
        "variant", "HxW", "params", "formula", "measured", "ratio", "wall_us"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<7} {:>9} {:>8} {:>14} {:>14} {:>7.3} {:>10}\n",
            r.variant.to_string(),
            format!("{}x{}", r.shape.h, r.shape.w),
            r.params,
            r.formula_macs,
            r.measured_macs,
            r.measured_macs as f64 / r.formula_macs as f64,
            r.wall_ns / 1000
        ));
    }
    s
}
