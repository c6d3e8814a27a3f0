#![allow(dead_code)]

use lambda_core::{OffsetInstance, SparseVector};
use proptest::prelude::*;

/// A batch of 1..=max_n instances over `d` dense features in [-3, 3].
pub fn batch(d: usize, max_n: usize) -> impl Strategy<Value = Vec<OffsetInstance>> {
    prop::collection::vec(
        (prop::collection::vec(-3.0f64..3.0, d), -2.0f64..2.0, any::<bool>()),
        1..=max_n,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .map(|(z, offset, y)| OffsetInstance::new(offset, SparseVector::from_dense(&z), u8::from(y)).unwrap())
            .collect()
    })
}

pub fn vector(d: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-bound..bound, d)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `-ln(sigma(s))` for label 1 or `-ln(1 - sigma(s))` for label 0, directly.
pub fn naive_loss(s: f64, y: u8) -> f64 {
    let p = 1.0 / (1.0 + (-s).exp());
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}
