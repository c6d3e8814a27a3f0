//! One mini-batch update of a random-effect posterior.
//!
//! Past data enter only through the previous posterior: the discounted past
//! loss is replaced by `(delta/2) ||b - mean||^2_H`, the new batch is fitted on
//! top of it, and the stored curvature follows `H <- delta H + curvature(batch)`.
//! `lambda I` is kept out of `H` and added at solve and covariance time, so the
//! base prior never compounds across updates.

use crate::batch::{per_entity_solve, EntityProblem};
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{self, OffsetInstance};
use crate::model::{CoefficientState, HessianStore, TrainerConfig};

/// Posterior covariance `(H + lambda I)^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    /// Dense row-major `d x d`.
    Full {
        dim: usize,
        values: Vec<f64>,
    },
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full { dim, .. } => *dim,
            Covariance::Diagonal(d) => d.len(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Covariance::Full { dim, values } => values[i * dim + j],
            Covariance::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
        }
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    /// `z^T Sigma z` for a dense `z`.
    pub fn quad_form(&self, z: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += z[i] * self.get(i, j) * z[j];
            }
        }
        acc
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }
}

pub fn posterior_covariance(state: &CoefficientState) -> Result<Covariance> {
    if !(state.lambda > 0.0) {
        return Err(Error::InvalidInput(format!(
            "lambda must be positive, got {}",
            state.lambda
        )));
    }
    match &state.hessian {
        HessianStore::Diagonal(h) => Ok(Covariance::Diagonal(
            h.iter().map(|&v| 1.0 / (v + state.lambda)).collect(),
        )),
        full @ HessianStore::Full { dim, .. } => {
            let mut a = full.to_dense();
            for i in 0..*dim {
                a[i * dim + i] += state.lambda;
            }
            let values = linalg::spd_inverse(&a, *dim)?;
            Ok(Covariance::Full { dim: *dim, values })
        }
    }
}

#[derive(Clone, Debug)]
pub struct IncrementalUpdateResult {
    /// The updated posterior; version bumped, timestamp untouched.
    pub state: CoefficientState,
    /// Incremental objective at the previous mean and at the new mean.
    pub batch_loss_before: f64,
    pub batch_loss_after: f64,
    pub iterations: usize,
}

impl IncrementalUpdateResult {
    pub fn new_mean(&self) -> &[f64] {
        &self.state.mean
    }

    pub fn new_hessian(&self) -> &HessianStore {
        &self.state.hessian
    }

    pub fn posterior_covariance(&self) -> Result<Covariance> {
        posterior_covariance(&self.state)
    }
}

/// Applies one mini-batch to `state` with forgetting factor `config.delta`.
///
/// An empty batch still counts as an update: `H` decays to `delta H` and the
/// mean is re-solved from the data-free objective.
pub fn incremental_update(
    state: &CoefficientState,
    batch: &[OffsetInstance],
    config: &TrainerConfig,
) -> Result<IncrementalUpdateResult> {
    config.validate()?;
    if state.hessian.dim() != state.dim() {
        return Err(Error::DimensionMismatch("state mean and hessian dims differ".into()));
    }
    let problem = EntityProblem {
        batch,
        prior_mean: &state.mean,
        prior_hessian: &state.hessian,
        prior_weight: config.delta,
        lambda: state.lambda,
    };
    let before = problem.objective(&state.mean)?;
    let out = per_entity_solve(&problem, config, Some(&state.mean))?;
    Ok(IncrementalUpdateResult {
        state: CoefficientState {
            mean: out.mean,
            hessian: out.hessian,
            lambda: state.lambda,
            version: state.version + 1,
            last_update_ts: state.last_update_ts,
        },
        batch_loss_before: before,
        batch_loss_after: out.objective,
        iterations: out.iterations,
    })
}

#[derive(Clone, Debug)]
pub struct HessianChainReport {
    /// Max elementwise difference between chained and recomputed `H` after each step.
    pub per_step_max_diff: Vec<f64>,
    pub max_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs the incremental chain from `initial` and checks the stored `H`
/// against a direct recomputation
/// `delta^t H_0 + sum_k delta^{t-k} curvature(batch_k, mean_k)`.
pub fn chained_update_equivalence_check(
    initial: &CoefficientState,
    batches: &[Vec<OffsetInstance>],
    config: &TrainerConfig,
) -> Result<HessianChainReport> {
    const TOL: f64 = 1e-10;
    let mode = initial.hessian.mode();
    let mut state = initial.clone();
    let mut contribs: Vec<HessianStore> = Vec::with_capacity(batches.len());
    let mut per_step = Vec::with_capacity(batches.len());
    for (t, batch) in batches.iter().enumerate() {
        state = incremental_update(&state, batch, config)?.state;
        contribs.push(loss::hessian_contrib(batch, &state.mean, mode)?);
        let mut expected = initial.hessian.scaled(config.delta.powi(t as i32 + 1));
        for (k, c) in contribs.iter().enumerate() {
            expected.add_assign(&c.scaled(config.delta.powi((t - k) as i32)))?;
        }
        per_step.push(state.hessian.max_abs_diff(&expected));
    }
    let max_diff = per_step.iter().copied().fold(0.0, f64::max);
    Ok(HessianChainReport {
        passed: max_diff <= TOL,
        per_step_max_diff: per_step,
        max_diff,
        tolerance: TOL,
    })
}
