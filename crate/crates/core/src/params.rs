//! Helpers for named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `Tensor` for storage
//! and checkpoints, [`Var`](crate::autodiff::Var) while a forward pass is
//! being recorded. Each struct provides `map`, which rebuilds the tree leaf by
//! leaf and hands the callback a dotted path such as `shared.0.attn.w_q`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gaussian initialization with the given standard deviation.
pub(crate) fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Glorot-style init for a `fan_in × fan_out` weight matrix.
pub(crate) fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    normal(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
