use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment buffers, kept in f64 regardless of the parameter type.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Float>(params: &[(String, Tensor<T>)]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One AdamW update with decoupled weight decay, `w ← w − lr·λ·w − lr·m̂/(√v̂+ε)`.
///
/// `grads[i]` belongs to `params[i]`. A parameter whose gradient is exactly
/// zero keeps its moments and only receives the decay term. Any non-finite
/// gradient aborts before anything is modified.
pub fn adamw_step<T: Float>(
    params: &[(String, Tensor<T>)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(Error::shape("adamw_step", format!("gradient of `{name}` has {} values, expected {}", g.len(), t.numel())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at index {i} ({})", g[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, ((_, p), g)) in params.iter().zip(grads).enumerate() {
        let active = g.iter().any(|&v| v != 0.0);
        if !active && decay == 1.0 {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update(|w| {
            for j in 0..w.len() {
                let mut x = w[j].as_f64() * decay;
                if active {
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                    x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                }
                w[j] = T::of(x);
            }
        })?;
    }
    Ok(())
}

/// Exponential decay `lr0 · γ^epoch`.
pub fn lr_schedule(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

/// Decay rate that shrinks the rate by `factor` over `epochs` epochs.
pub fn gamma_for(factor: f64, epochs: usize) -> f64 {
    if epochs == 0 {
        1.0
    } else {
        factor.powf(-1.0 / epochs as f64)
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<(String, Tensor<f64>)> {
        vec![("w".into(), Tensor::param(&[1], vec![v]).unwrap())]
    }

    #[test]
    fn zero_gradient_cases() {
        let p = one(0.7);
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&p, &[vec![0.0]], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p[0].1.item(), 0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&p, &[vec![0.0]], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p[0].1.item(), 0.7 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let p = one(1.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..200 {
            let w = p[0].1.item();
            adamw_step(&p, &[vec![2.0 * w]], &mut st, 0.1, &cfg).unwrap();
        }
        assert!(p[0].1.item().abs() < 1e-3, "{}", p[0].1.item());
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let p = one(1.0);
        let mut st = AdamState::new(&p);
        let err = adamw_step(&p, &[vec![f64::NAN]], &mut st, 0.1, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!((p[0].1.item(), st.step), (1.0, 0));
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(1e-3, 0.97, 0), 1e-3);
        assert_eq!(lr_schedule(2e-3, 1.0, 50), 2e-3);
        assert!((lr_schedule(1e-3, 0.97, 100) - 4.755e-5).abs() < 1e-8);
        assert!((lr_schedule(1.0, gamma_for(30.0, 20), 20) - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
