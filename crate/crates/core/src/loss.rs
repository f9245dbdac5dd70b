//! Differentiable segmentation losses over per-pixel class probabilities.
//!
//! `probs` is `[C, H, W]` after a softmax over the class axis.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Float, Tensor};

pub const LOG_FLOOR: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-5;
/// Allowed deviation of a probability column sum from 1.
const SIMPLEX_TOL: f64 = 1e-4;

fn check_inputs<T: Float>(op: &'static str, probs: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
    let s = probs.shape();
    if s.len() != 3 || s[1] != labels.height || s[2] != labels.width {
        return Err(Error::shape(
            op,
            format!("probs {s:?} vs labels {}×{}", labels.height, labels.width),
        ));
    }
    let (c, n) = (s[0], labels.len());
    {
        let d = probs.data();
        for p in 0..n {
            let total: f64 = (0..c).map(|k| d[k * n + p].as_f64()).sum();
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Contract(format!(
                    "{op}: probabilities at pixel {p} sum to {total}, expected 1"
                )));
            }
        }
    }
    labels.one_hot(c)
}

/// Pixel-averaged cross-entropy, `-mean log p[label]` with the log argument
/// clamped at `LOG_FLOOR`.
pub fn ce_loss<T: Float>(probs: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
    let y = check_inputs("ce_loss", probs, labels)?;
    let picked = probs.mul(&y)?.sum_axis(0)?;
    Ok(picked.log_clamped(T::of(LOG_FLOOR)).mean().scale(T::of(-1.0)))
}

/// Soft Dice loss averaged over classes, each class smoothed by `DICE_EPS`
/// over the whole image.
pub fn dice_loss<T: Float>(probs: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
    let y = check_inputs("dice_loss", probs, labels)?;
    let c = probs.shape()[0];
    let n = labels.len();
    let flat = |t: &Tensor<T>| t.reshape(&[c, n]);
    let (p, y) = (flat(probs)?, flat(&y)?);
    let eps = T::of(DICE_EPS);
    let inter = p.mul(&y)?.sum_axis(1)?.scale(T::of(2.0)).add_scalar(eps);
    let denom = y.sum_axis(1)?.add(&p.sum_axis(1)?)?.add_scalar(eps);
    let ratio = inter.div(&denom)?;
    Ok(ratio.scale(T::of(-1.0)).add_scalar(T::one()).mean())
}

/// Both loss terms plus their sum, kept separately for logging.
#[derive(Clone, Debug)]
pub struct LossParts<T: Float> {
    pub ce: Tensor<T>,
    pub dice: Tensor<T>,
    pub total: Tensor<T>,
}

pub fn loss_parts<T: Float>(probs: &Tensor<T>, labels: &LabelMap) -> Result<LossParts<T>> {
    let ce = ce_loss(probs, labels)?;
    let dice = dice_loss(probs, labels)?;
    let total = ce.add(&dice)?;
    Ok(LossParts { ce, dice, total })
}

pub fn total_loss<T: Float>(probs: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
    Ok(loss_parts(probs, labels)?.total)
}
