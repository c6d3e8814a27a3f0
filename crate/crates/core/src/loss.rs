//! Log-logistic loss with labels in {0, 1}:
//! `l(s, y) = log(1 + e^s) - y s`, evaluated as `max(s, 0) + log1p(e^{-|s|}) - y s`.

use crate::error::{Error, Result};
use crate::model::{HessianMode, HessianStore, SparseVector};

const CLAMP: f64 = 700.0;

/// An observation seen by one random-effect model: the frozen score of every
/// other model part (`offset`) plus the active entity's features.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetInstance {
    pub offset: f64,
    pub features: SparseVector,
    pub label: u8,
}

impl OffsetInstance {
    pub fn new(offset: f64, features: SparseVector, label: u8) -> Result<Self> {
        if !offset.is_finite() {
            return Err(Error::NonFinite(format!("offset {offset}")));
        }
        if label > 1 {
            return Err(Error::InvalidInput(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Self {
            offset,
            features,
            label,
        })
    }

    #[inline]
    fn margin(&self, beta: &[f64]) -> f64 {
        self.offset + self.features.iter().map(|(i, v)| v * beta[i]).sum::<f64>()
    }
}

#[inline]
pub fn sigmoid(s: f64) -> f64 {
    let s = s.clamp(-CLAMP, CLAMP);
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Loss of one margin/label pair.
#[inline]
pub fn pointwise_loss(s: f64, y: f64) -> f64 {
    let s = s.clamp(-CLAMP, CLAMP);
    s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s
}

fn check_dims(batch: &[OffsetInstance], beta: &[f64]) -> Result<()> {
    for inst in batch {
        inst.features.check_dim(beta.len())?;
    }
    Ok(())
}

pub fn logloss(batch: &[OffsetInstance], beta: &[f64]) -> Result<f64> {
    check_dims(batch, beta)?;
    Ok(batch
        .iter()
        .map(|inst| pointwise_loss(inst.margin(beta), f64::from(inst.label)))
        .sum())
}

/// `sum_n (sigma(s_n) - y_n) z_n`.
pub fn grad(batch: &[OffsetInstance], beta: &[f64]) -> Result<Vec<f64>> {
    check_dims(batch, beta)?;
    let mut g = vec![0.0; beta.len()];
    for inst in batch {
        let r = sigmoid(inst.margin(beta)) - f64::from(inst.label);
        for (i, v) in inst.features.iter() {
            g[i] += r * v;
        }
    }
    Ok(g)
}

/// `sum_n w_n z_n z_n^T` with `w_n = sigma(s_n)(1 - sigma(s_n))`.
pub fn hessian_contrib(batch: &[OffsetInstance], beta: &[f64], mode: HessianMode) -> Result<HessianStore> {
    check_dims(batch, beta)?;
    let mut h = HessianStore::zeros(mode, beta.len());
    for inst in batch {
        let p = sigmoid(inst.margin(beta));
        h.add_outer(p * (1.0 - p), &inst.features);
    }
    Ok(h)
}

/// Loss, gradient and curvature in one pass over the batch.
pub(crate) fn loss_grad_hessian(
    batch: &[OffsetInstance],
    beta: &[f64],
    mode: HessianMode,
) -> (f64, Vec<f64>, HessianStore) {
    let mut loss = 0.0;
    let mut g = vec![0.0; beta.len()];
    let mut h = HessianStore::zeros(mode, beta.len());
    for inst in batch {
        let s = inst.margin(beta);
        let y = f64::from(inst.label);
        let p = sigmoid(s);
        loss += pointwise_loss(s, y);
        for (i, v) in inst.features.iter() {
            g[i] += (p - y) * v;
        }
        h.add_outer(p * (1.0 - p), &inst.features);
    }
    (loss, g, h)
}
