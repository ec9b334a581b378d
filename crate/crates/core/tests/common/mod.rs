#![allow(dead_code)]

use lmec_core::attention::{LinearAttentionSpec, OrderPolicy};
use lmec_core::kernels::{ActivationKind, PeKind};
use lmec_core::{Matrix, Rng};

pub const ACTIVATIONS: [ActivationKind; 4] = [
    ActivationKind::Relu,
    ActivationKind::Sigmoid,
    ActivationKind::TanhShift,
    ActivationKind::EluPlusOne,
];

pub fn single_head(
    activation: ActivationKind,
    pe: PeKind,
    order: OrderPolicy,
    normalize: bool,
    d_k: usize,
    max_len: usize,
    rng: &mut Rng,
) -> LinearAttentionSpec {
    LinearAttentionSpec {
        activation,
        pe: pe.instantiate(max_len, d_k, rng),
        order,
        normalize,
        d_k,
        heads: 1,
    }
}

pub fn with_order(spec: &LinearAttentionSpec, order: OrderPolicy) -> LinearAttentionSpec {
    LinearAttentionSpec { order, ..spec.clone() }
}

/// Random `q`, `k`, `v`. ReLU inputs are made non-negative so that no
/// query row is annihilated and normalization stays defined.
pub fn qkv(activation: ActivationKind, n: usize, d_k: usize, rng: &mut Rng) -> (Matrix, Matrix, Matrix) {
    let mut q = rng.normal_matrix(n, d_k, 1.0);
    let mut k = rng.normal_matrix(n, d_k, 1.0);
    if activation == ActivationKind::Relu {
        q = q.map(f64::abs);
        k = k.map(f64::abs);
    }
    let v = rng.normal_matrix(n, d_k, 1.0);
    (q, k, v)
}
