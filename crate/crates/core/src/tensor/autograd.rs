use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Float, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables tape recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Gradients produced by one backward pass, keyed by tensor id.
///
/// Holds exactly one entry for every tracked tensor reachable from the loss.
pub struct Gradients<T: Float> {
    grads: HashMap<u64, (Vec<usize>, Vec<T>)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|(_, g)| g.as_slice())
    }

    pub fn get_tensor(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        self.grads
            .get(&t.id())
            .map(|(s, g)| Tensor::from_vec(s, g.clone()).expect("grad shape"))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, t: &Tensor<T>) -> bool {
        self.grads.contains_key(&t.id())
    }
}

impl<T: Float> Tensor<T> {
    /// Reverse-mode pass from a single-element loss.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let mut grads: HashMap<u64, (Vec<usize>, Vec<T>)> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads });
        }

        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(op) = t.op() {
                for inp in &op.inputs {
                    if inp.requires_grad() && seen.insert(inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        grads.insert(self.id(), (self.shape().to_vec(), vec![T::one()]));
        for t in &order {
            let Some(op) = t.op() else { continue };
            let input_grads = {
                let Some((_, g)) = grads.get(&t.id()) else { continue };
                let out = t.data();
                (op.backward)(g, &out, &op.inputs)
            };
            debug_assert_eq!(input_grads.len(), op.inputs.len(), "{}", op.kind);
            for (inp, g) in op.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), inp.numel(), "grad size for {}", op.kind);
                match grads.get_mut(&inp.id()) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(inp.id(), (inp.shape().to_vec(), g));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
