mod conv;
mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use conv::{Conv2dOpts, PadMode};

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
