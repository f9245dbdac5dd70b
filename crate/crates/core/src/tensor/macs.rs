//! Multiply-accumulate counters for the matmul and convolution kernels.
//!
//! One MAC is one multiply paired with one add in a kernel inner loop.
//! Softmax exponentials, normalization and elementwise ops are not counted.
//! Counters are per thread.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn count() -> u64 {
    MACS.with(|c| c.get())
}

/// Runs `f` and returns its result with the MACs it executed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = count();
    let r = f();
    (r, count() - start)
}
