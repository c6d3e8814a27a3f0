//! Offline training of the initial mixed-effect model by backfitting, and the
//! per-entity regularized logistic solve shared with the incremental path.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{self, OffsetInstance};
use crate::model::{
    CoefficientState, GameModel, HessianMode, HessianStore, Instance, LinearFixedEffect, ReKey, Schema, ScoreSource,
    TrainerConfig,
};

pub const DEFAULT_ROUNDS: usize = 3;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;

/// `min_b (w/2)||b - m||^2_P + logloss(batch, b) + (lambda/2)||b||^2`.
#[derive(Clone, Copy, Debug)]
pub struct EntityProblem<'a> {
    pub batch: &'a [OffsetInstance],
    pub prior_mean: &'a [f64],
    pub prior_hessian: &'a HessianStore,
    pub prior_weight: f64,
    pub lambda: f64,
}

impl<'a> EntityProblem<'a> {
    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.prior_hessian.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "prior mean has dim {d}, prior hessian dim {}",
                self.prior_hessian.dim()
            )));
        }
        if !(self.prior_weight >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidInput(
                "prior weight and lambda must be non-negative".into(),
            ));
        }
        for inst in self.batch {
            inst.features.check_dim(d)?;
        }
        Ok(())
    }

    fn prior_term(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = beta.iter().zip(self.prior_mean).map(|(b, m)| b - m).collect();
        let pd = self.prior_hessian.mul_vec(&diff);
        let value = 0.5 * self.prior_weight * linalg::dot(&diff, &pd);
        let grad = pd.into_iter().map(|v| self.prior_weight * v).collect();
        (value, grad)
    }

    pub fn objective(&self, beta: &[f64]) -> Result<f64> {
        let (prior, _) = self.prior_term(beta);
        Ok(prior + loss::logloss(self.batch, beta)? + 0.5 * self.lambda * linalg::dot(beta, beta))
    }

    pub fn gradient(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let (_, mut g) = self.prior_term(beta);
        let gl = loss::grad(self.batch, beta)?;
        for ((gi, li), bi) in g.iter_mut().zip(gl).zip(beta) {
            *gi += li + self.lambda * bi;
        }
        Ok(g)
    }

    fn evaluate(&self, beta: &[f64], mode: HessianMode) -> (f64, Vec<f64>, HessianStore) {
        let (prior, mut g) = self.prior_term(beta);
        let (l, gl, hl) = loss::loss_grad_hessian(self.batch, beta, mode);
        for ((gi, li), bi) in g.iter_mut().zip(gl).zip(beta) {
            *gi += li + self.lambda * bi;
        }
        let f = prior + l + 0.5 * self.lambda * linalg::dot(beta, beta);
        (f, g, hl)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutcome {
    pub mean: Vec<f64>,
    /// `prior_weight * prior_hessian + hessian_contrib(batch, mean)`: the data
    /// curvature of the new posterior, without `lambda I`.
    pub hessian: HessianStore,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Minimizes an [`EntityProblem`] to `||grad|| <= config.solver_tol`.
///
/// Full mode takes damped Newton steps; diagonal mode scales the gradient by
/// the diagonal of the objective's Hessian. Both backtrack with Armijo
/// (`c = 1e-4`, halving). The search starts at `start`, or the prior mean.
pub fn per_entity_solve(
    problem: &EntityProblem<'_>,
    config: &TrainerConfig,
    start: Option<&[f64]>,
) -> Result<SolveOutcome> {
    problem.validate()?;
    let mode = problem.prior_hessian.mode();
    let d = problem.dim();
    let mut beta = match start {
        Some(s) if s.len() == d => s.to_vec(),
        Some(s) => {
            return Err(Error::DimensionMismatch(format!(
                "start point has dim {}, problem dim {d}",
                s.len()
            )))
        }
        None => problem.prior_mean.to_vec(),
    };

    let (mut f, mut g, mut h_data) = problem.evaluate(&beta, mode);
    let mut iterations = 0;
    let mut stalled = false;
    loop {
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("objective {f} at iteration {iterations}")));
        }
        let gnorm = linalg::norm(&g);
        if gnorm <= config.solver_tol || stalled {
            let mut hessian = problem.prior_hessian.scaled(problem.prior_weight);
            hessian.add_assign(&loss::hessian_contrib(problem.batch, &beta, mode)?)?;
            return Ok(SolveOutcome {
                mean: beta,
                hessian,
                objective: f,
                grad_norm: gnorm,
                iterations,
            });
        }
        if iterations >= config.solver_max_iter {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: gnorm,
                last_iterate: beta,
            });
        }

        let direction = descent_direction(problem, &h_data, &g)?;
        let slope = linalg::dot(&g, &direction);
        // Below the objective's rounding noise the Armijo test is meaningless;
        // take the full step while it still shrinks the gradient.
        if -slope <= 64.0 * f64::EPSILON * f.abs().max(1.0) {
            let trial: Vec<f64> = beta.iter().zip(&direction).map(|(b, p)| b + p).collect();
            let (ft, gt, ht) = problem.evaluate(&trial, mode);
            if ft.is_finite() && linalg::norm(&gt) < gnorm {
                beta = trial;
                f = ft;
                g = gt;
                h_data = ht;
                iterations += 1;
            } else {
                stalled = true;
            }
            continue;
        }
        // rounding slack so a converged-but-noisy objective does not stall the search
        let slack = 8.0 * f64::EPSILON * f.abs().max(1.0);
        let mut step = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = beta.iter().zip(&direction).map(|(b, p)| b + step * p).collect();
            let (ft, gt, ht) = problem.evaluate(&trial, mode);
            if ft.is_finite() && ft <= f + ARMIJO_C * step * slope + slack {
                break Some((trial, ft, gt, ht));
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        match accepted {
            Some((b, ft, gt, ht)) => {
                beta = b;
                f = ft;
                g = gt;
                h_data = ht;
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations,
                    grad_norm: gnorm,
                    last_iterate: beta,
                })
            }
        }
        iterations += 1;
    }
}

fn descent_direction(problem: &EntityProblem<'_>, h_data: &HessianStore, g: &[f64]) -> Result<Vec<f64>> {
    let d = problem.dim();
    let w = problem.prior_weight;
    match h_data {
        HessianStore::Diagonal(hd) => Ok((0..d)
            .map(|i| {
                let c = w * problem.prior_hessian.get(i, i) + hd[i] + problem.lambda;
                let c = if c > 0.0 { c } else { 1.0 };
                -g[i] / c
            })
            .collect()),
        HessianStore::Full { .. } => {
            let mut a = h_data.to_dense();
            let p = problem.prior_hessian.to_dense();
            for (ai, pi) in a.iter_mut().zip(&p) {
                *ai += w * pi;
            }
            for i in 0..d {
                a[i * d + i] += problem.lambda;
            }
            // singular only when lambda = 0 and the data leave a direction flat
            let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
            let mut jitter = 0.0;
            loop {
                let mut aj = a.clone();
                for i in 0..d {
                    aj[i * d + i] += jitter;
                }
                match linalg::cholesky(&aj, d) {
                    Ok(l) => {
                        let step = linalg::cholesky_solve(&l, d, g);
                        return Ok(step.into_iter().map(|v| -v).collect());
                    }
                    Err(e) => {
                        jitter = if jitter == 0.0 {
                            1e-12 * trace.abs().max(1.0)
                        } else {
                            jitter * 100.0
                        };
                        if jitter > 1e6 * trace.abs().max(1.0) {
                            return Err(e);
                        }
                    }
                }
            }
        }
    }
}

/// Objective of the whole mixed model on `data`: total log-loss plus the
/// Gaussian priors of every coefficient block.
pub fn game_objective(model: &GameModel, data: &[Instance], config: &TrainerConfig) -> Result<f64> {
    let mut total = 0.0;
    for inst in data {
        total += loss::pointwise_loss(model.score(inst)?, inst.y());
    }
    total += 0.5 * config.lambda * linalg::dot(&model.fixed.coeffs, &model.fixed.coeffs);
    for (key, st) in &model.random_effects {
        total += 0.5 * config.lambda_for(&key.re_type) * linalg::dot(&st.mean, &st.mean);
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct BatchTrainReport {
    pub model: GameModel,
    /// Objective after each backfitting round.
    pub round_objectives: Vec<f64>,
    pub initial_objective: f64,
}

/// Trains fixed and random effects from scratch by backfitting: each round
/// fits the fixed effect, then every random-effect type in name order, each
/// block with all other blocks' scores as offsets.
pub fn train_batch(data: &[Instance], schema: &Schema, config: &TrainerConfig, rounds: usize) -> Result<GameModel> {
    train_batch_report(data, schema, config, rounds).map(|r| r.model)
}

pub fn train_batch_report(
    data: &[Instance],
    schema: &Schema,
    config: &TrainerConfig,
    rounds: usize,
) -> Result<BatchTrainReport> {
    let model = GameModel::zeros(schema.clone(), config.hessian_mode);
    backfit(model, data, config, rounds, true)
}

/// Refits only the random effects on `data`, holding the fixed effect of
/// `base` fixed. Entities start from the prior, as in a fresh batch job.
pub fn retrain_random_effects(
    base: &GameModel,
    data: &[Instance],
    config: &TrainerConfig,
    rounds: usize,
) -> Result<GameModel> {
    let mut model = GameModel::zeros(base.schema.clone(), config.hessian_mode);
    model.fixed = base.fixed.clone();
    backfit(model, data, config, rounds, false).map(|r| r.model)
}

fn backfit(
    mut model: GameModel,
    data: &[Instance],
    config: &TrainerConfig,
    rounds: usize,
    fit_fixed: bool,
) -> Result<BatchTrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTrainingWindow);
    }
    if rounds == 0 {
        return Err(Error::InvalidConfig("rounds must be at least 1".into()));
    }
    let schema = model.schema.clone();
    for inst in data {
        schema.validate(inst)?;
    }

    // type -> id -> instance indices, all in sorted order
    let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (n, inst) in data.iter().enumerate() {
        for a in &inst.re_assignments {
            groups
                .entry(a.re_type.as_str())
                .or_default()
                .entry(a.re_id.as_str())
                .or_default()
                .push(n);
        }
    }
    for (re_type, ids) in &groups {
        let d = schema.re_dim(re_type)?;
        let lambda = config.lambda_for(re_type);
        for (id, idx) in ids {
            let mut st = CoefficientState::prior(d, config.hessian_mode, lambda);
            st.last_update_ts = idx.iter().map(|&n| data[n].ts).max().unwrap_or(0);
            model.random_effects.insert(ReKey::new(*re_type, *id), st);
        }
    }

    let initial_objective = game_objective(&model, data, config)?;
    let mut round_objectives = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        if fit_fixed {
            fit_fixed_effect(&mut model, data, config)?;
        }
        for (re_type, ids) in &groups {
            fit_re_type(&mut model, data, config, re_type, ids)?;
        }
        round_objectives.push(game_objective(&model, data, config)?);
    }

    // curvature of each entity's data term at the final coefficients
    for (re_type, ids) in &groups {
        let hs: Vec<(ReKey, HessianStore)> = ids
            .par_iter()
            .map(|(id, idx)| {
                let key = ReKey::new(*re_type, *id);
                let batch = entity_batch(&model, data, idx, re_type)?;
                let h = loss::hessian_contrib(&batch, &model.random_effects[&key].mean, config.hessian_mode)?;
                Ok((key, h))
            })
            .collect::<Result<_>>()?;
        for (key, h) in hs {
            model.random_effects.get_mut(&key).expect("initialized above").hessian = h;
        }
    }

    Ok(BatchTrainReport {
        model,
        round_objectives,
        initial_objective,
    })
}

fn fit_fixed_effect(model: &mut GameModel, data: &[Instance], config: &TrainerConfig) -> Result<()> {
    let batch = data
        .iter()
        .map(|inst| {
            let offset = inst
                .re_assignments
                .iter()
                .map(|a| model.re_score(a))
                .sum::<Result<f64>>()?;
            OffsetInstance::new(offset, inst.fixed_features.clone(), inst.label)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = model.schema.fixed_dim;
    let prior = vec![0.0; d];
    let prior_h = HessianStore::zeros(HessianMode::Full, d);
    let problem = EntityProblem {
        batch: &batch,
        prior_mean: &prior,
        prior_hessian: &prior_h,
        prior_weight: 0.0,
        lambda: config.lambda,
    };
    let out = per_entity_solve(&problem, config, Some(&model.fixed.coeffs))?;
    model.fixed = LinearFixedEffect { coeffs: out.mean };
    Ok(())
}

/// Offset instances for one entity: everything but the `active_type` term.
fn entity_batch(model: &GameModel, data: &[Instance], idx: &[usize], active_type: &str) -> Result<Vec<OffsetInstance>> {
    idx.iter()
        .map(|&n| {
            let inst = &data[n];
            let mut offset = model.fixed_score(&inst.fixed_features)?;
            let mut features = None;
            for a in &inst.re_assignments {
                if a.re_type == active_type {
                    features = Some(a.features.clone());
                } else {
                    offset += model.re_score(a)?;
                }
            }
            let features = features.ok_or_else(|| Error::InvalidInput("instance lacks the active type".into()))?;
            OffsetInstance::new(offset, features, inst.label)
        })
        .collect()
}

fn fit_re_type(
    model: &mut GameModel,
    data: &[Instance],
    config: &TrainerConfig,
    re_type: &str,
    ids: &BTreeMap<&str, Vec<usize>>,
) -> Result<()> {
    let d = model.schema.re_dim(re_type)?;
    let lambda = config.lambda_for(re_type);
    let zero = vec![0.0; d];
    let zero_h = HessianStore::zeros(config.hessian_mode, d);
    let snapshot: &GameModel = model;
    let fitted: Vec<(ReKey, Vec<f64>)> = ids
        .par_iter()
        .map(|(id, idx)| {
            let key = ReKey::new(re_type, *id);
            let batch = entity_batch(snapshot, data, idx, re_type)?;
            let problem = EntityProblem {
                batch: &batch,
                prior_mean: &zero,
                prior_hessian: &zero_h,
                prior_weight: 0.0,
                lambda,
            };
            let start = snapshot.random_effects.get(&key).map(|s| s.mean.as_slice());
            let out = per_entity_solve(&problem, config, start)?;
            Ok((key, out.mean))
        })
        .collect::<Result<_>>()?;
    for (key, mean) in fitted {
        model.random_effects.get_mut(&key).expect("initialized").mean = mean;
    }
    Ok(())
}
