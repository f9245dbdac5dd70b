//! Central finite-difference verification of autodiff gradients (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per input (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Denominator floor so near-zero gradients are compared absolutely. At
    /// `eps = 1e-5` the numeric derivative of an O(10) loss carries about
    /// 2e-10 of rounding noise, so the floor has to sit well above 1e-6.
    pub floor: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    /// Tape and finite-difference values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f()` with respect to each leaf in
/// `inputs` against central differences, returning the worst relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOpts) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_leaf() || !t.requires_grad() {
            return Err(Error::Contract(format!(
                "grad_check input {i} must be a tracked leaf"
            )));
        }
    }
    let out = f()?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar output, got {:?}",
            out.shape()
        )));
    }
    let grads = out.backward()?;
    drop(out);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let eval = || -> Result<f64> {
        let _g = super::no_grad();
        Ok(f()?.item())
    };
    for (ii, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < t.numel() => sample(&mut rng, t.numel(), m).into_vec(),
            _ => (0..t.numel()).collect(),
        };
        for idx in coords {
            let orig = t.data()[idx];
            t.update(|d| d[idx] = orig + opts.eps)?;
            let plus = eval()?;
            t.update(|d| d[idx] = orig - opts.eps)?;
            let minus = eval()?;
            t.update(|d| d[idx] = orig)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = rel_error(analytic[idx], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_input = ii;
                report.worst_index = idx;
                report.worst_analytic = analytic[idx];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::<f64>::param(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let w = Tensor::<f64>::from_vec(&[4], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let r = grad_check(|| Ok(x.mul(&w)?.sum()), std::slice::from_ref(&x), &GradCheckOpts::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|| Ok(x.scale(2.0)), std::slice::from_ref(&x), &GradCheckOpts::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at a kink point: analytic 0, numeric 0.5
        let x = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        let r = grad_check(|| Ok(x.relu().sum()), std::slice::from_ref(&x), &GradCheckOpts::default()).unwrap();
        assert!(r.max_rel_error > 0.5);
    }
}
