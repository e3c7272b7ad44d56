//! Neural-network building blocks shared by the detector and the fusion
//! transformer.
//!
//! Everything here is plain `f64` on the CPU with explicit forward/backward
//! passes: each layer's `forward_cached` returns the activations plus a cache,
//! and `backward` consumes that cache, accumulates parameter gradients in
//! place, and returns the gradient with respect to the layer input. There is
//! no autograd tape; composites wire their backward passes by hand, which
//! keeps every gradient inspectable and finite-difference checkable.
//!
//! Parameter access is uniform through the [`Params`] trait: a model visits
//! every learnable tensor in a fixed deterministic order as a named flat
//! slice. The optimizer, checkpoint serialization, parameter counting, and
//! the finite-difference checker are all built on that single visitation
//! primitive.
//!
//! Forward passes also feed a per-thread multiply counter (see
//! [`reset_mul_counter`] / [`muls_recorded`]): linear and convolution layers
//! record every multiplication they perform, including multiplications by
//! zero-padding, so tests can compare an instrumented live forward against
//! the closed-form cost model with zero tolerance.

pub mod act;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod optim;

use std::cell::Cell;

use ndarray::{Array, Dimension};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use conv::{Conv2d, DepthwiseConv, PointwiseConv};
pub use init::{Init, Initializer};
pub use linear::Linear;
pub use norm::{ChannelAffine, LayerNorm};
pub use optim::AdamW;

thread_local! {
    static MUL_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Reset this thread's forward-pass multiply counter to zero.
pub fn reset_mul_counter() {
    MUL_COUNTER.with(|c| c.set(0));
}

/// Number of multiplications performed by forward passes on this thread
/// since the last [`reset_mul_counter`].
pub fn muls_recorded() -> u64 {
    MUL_COUNTER.with(|c| c.get())
}

#[inline]
pub(crate) fn record_muls(n: u64) {
    MUL_COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

/// A mutable view of one learnable tensor: its hierarchical name, shape, and
/// the value/gradient storage as flat slices (row-major).
pub struct ParamTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

impl<'a> ParamTensor<'a> {
    /// Build a view over an owned ndarray value/gradient pair.
    pub fn new<D: Dimension>(
        name: String,
        value: &'a mut Array<f64, D>,
        grad: &'a mut Array<f64, D>,
    ) -> Self {
        let shape = value.shape().to_vec();
        debug_assert_eq!(value.shape(), grad.shape());
        ParamTensor {
            name,
            shape,
            value: value
                .as_slice_mut()
                .expect("parameter tensors are owned and contiguous"),
            grad: grad
                .as_slice_mut()
                .expect("gradient tensors are owned and contiguous"),
        }
    }
}

/// Uniform access to a model's learnable parameters.
///
/// Implementations must visit the same tensors in the same order on every
/// call; names must be unique within one model. All bulk parameter machinery
/// (optimizer steps, checkpoints, counting, finite differences) relies on
/// that stability.
pub trait Params {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>));
}

/// Total number of learnable scalars in a model.
pub fn param_count<M: Params + ?Sized>(model: &mut M) -> u64 {
    let mut n = 0u64;
    model.visit_params("", &mut |p| n += p.value.len() as u64);
    n
}

/// Zero every gradient buffer in a model.
pub fn zero_grads<M: Params + ?Sized>(model: &mut M) {
    model.visit_params("", &mut |p| p.grad.fill(0.0));
}

/// Snapshot all parameter values as (name, shape, data) triples.
pub fn export_params<M: Params + ?Sized>(model: &mut M) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |p| {
        out.push((p.name.clone(), p.shape.clone(), p.value.to_vec()));
    });
    out
}

/// Snapshot all gradients as (name, data) pairs.
pub fn export_grads<M: Params + ?Sized>(model: &mut M) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |p| out.push((p.name.clone(), p.grad.to_vec())));
    out
}

/// Join a visitation prefix with a component name ("a" + "b" -> "a.b").
pub fn scope(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_counter_accumulates_and_resets() {
        reset_mul_counter();
        record_muls(5);
        record_muls(7);
        assert_eq!(muls_recorded(), 12);
        reset_mul_counter();
        assert_eq!(muls_recorded(), 0);
    }

    #[test]
    fn scope_joins_names() {
        assert_eq!(scope("", "w"), "w");
        assert_eq!(scope("enc.0", "w"), "enc.0.w");
    }
}
