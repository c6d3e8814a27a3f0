//! Offline evaluation harness: a cold/warm split by time, equal-length
//! evaluation increments over the warm part, four model-update variants,
//! rank-sum AUC, the time-decay and forgetting-factor experiments, and a
//! numerical check of the incremental-improvement inequalities.
//!
//! Each increment is scored before any of its data is used for training.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{per_entity_solve, retrain_random_effects, train_batch, EntityProblem};
use crate::error::{Error, Result};
use crate::incremental::incremental_update;
use crate::linalg;
use crate::loss::{self, OffsetInstance};
use crate::model::{CoefficientState, GameModel, HessianStore, Instance, ReKey, Schema, SparseVector, TrainerConfig};
use crate::sampler::{derive_seed, sampled_score};
use crate::stream::{compute_offsets, MiniBatch};

/// Area under the ROC curve by rank sums; tied scores share their average rank,
/// which counts each tied positive/negative pair as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidInput(format!("label {bad} is not 0/1")));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep everything integral until the final division
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 average to (i+j+2)/2
        let avg_x2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_x2 += avg_x2;
            }
        }
        i = j + 1;
    }
    let p = positives as u64;
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / 2.0 / (positives as f64 * negatives as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The cold-trained model, never updated.
    Nu,
    /// Batch retrain on everything before each increment.
    Ibu,
    /// Batch retrain on everything older than the increment start minus `tau`.
    Rwbu,
    /// Incremental updates after every increment.
    Ll,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Nu, Variant::Ibu, Variant::Rwbu, Variant::Ll];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Nu => "nu",
            Variant::Ibu => "ibu",
            Variant::Rwbu => "rwbu",
            Variant::Ll => "ll",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nu" => Ok(Variant::Nu),
            "ibu" => Ok(Variant::Ibu),
            "rwbu" => Ok(Variant::Rwbu),
            "ll" => Ok(Variant::Ll),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub variant: Variant,
    /// Increment length and, for LL, the update cadence.
    pub delta_ms: i64,
    /// Batch-training delay; only meaningful for RWBU.
    pub tau_ms: i64,
    /// First timestamp of the warm part; everything earlier is cold.
    pub warm_start_ts: i64,
    pub trainer: TrainerConfig,
    /// Backfitting rounds for cold training and retrains.
    pub rounds: usize,
    /// Evaluate at most this many increments.
    pub max_increments: Option<usize>,
    /// Score with one Thompson draw per entity instead of posterior means.
    pub sample_seed: Option<u64>,
}

impl EvalConfig {
    pub fn new(variant: Variant, delta_ms: i64, warm_start_ts: i64) -> Self {
        Self {
            variant,
            delta_ms,
            tau_ms: 0,
            warm_start_ts,
            trainer: TrainerConfig::default(),
            rounds: crate::batch::DEFAULT_ROUNDS,
            max_increments: None,
            sample_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.delta_ms <= 0 {
            return Err(Error::InvalidConfig(format!(
                "increment length must be positive, got {}",
                self.delta_ms
            )));
        }
        if self.tau_ms < 0 {
            return Err(Error::InvalidConfig(format!(
                "tau must be non-negative, got {}",
                self.tau_ms
            )));
        }
        if self.tau_ms != 0 && self.variant != Variant::Rwbu {
            return Err(Error::InvalidConfig(format!(
                "tau only applies to rwbu, not {}",
                self.variant
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Timestamp that splits the span of `instances` at `fraction`.
pub fn split_ts(instances: &[Instance], fraction: f64) -> Result<i64> {
    let (first, last) = match (instances.first(), instances.last()) {
        (Some(a), Some(b)) => (a.ts, b.ts),
        _ => return Err(Error::EmptyTrainingWindow),
    };
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    Ok(first + (fraction * (last + 1 - first) as f64).round() as i64)
}

/// Which model scores an increment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSource {
    /// The cold-trained model.
    Initial,
    /// Random effects retrained on all data before `cutoff`.
    Retrain { cutoff: i64 },
    /// The cold model after `updates` incremental steps, one per earlier increment.
    Incremental { updates: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanStep {
    pub increment: usize,
    pub eval_start: i64,
    pub eval_end: i64,
    /// Exclusive upper bound on the timestamps the scoring model has seen.
    pub train_cutoff: i64,
    pub model: ModelSource,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPlan {
    pub steps: Vec<PlanStep>,
}

/// Lays out the increments over a warm span of `warm_span_ms` and the model
/// that scores each one.
pub fn plan_variant(config: &EvalConfig, warm_span_ms: i64) -> Result<EvalPlan> {
    config.validate()?;
    if warm_span_ms < config.delta_ms {
        return Err(Error::InvalidConfig(format!(
            "warm span {warm_span_ms} ms is shorter than one increment ({} ms)",
            config.delta_ms
        )));
    }
    let w = config.warm_start_ts;
    let mut n = (warm_span_ms / config.delta_ms) as usize;
    if let Some(max) = config.max_increments {
        n = n.min(max);
    }
    let steps = (0..n)
        .map(|i| {
            let eval_start = w + i as i64 * config.delta_ms;
            let (train_cutoff, model) = match config.variant {
                Variant::Nu => (w, ModelSource::Initial),
                Variant::Ll => (eval_start, ModelSource::Incremental { updates: i }),
                Variant::Ibu | Variant::Rwbu => {
                    let cutoff = eval_start.saturating_sub(config.tau_ms);
                    if cutoff <= w {
                        (w, ModelSource::Initial)
                    } else {
                        (cutoff, ModelSource::Retrain { cutoff })
                    }
                }
            };
            PlanStep {
                increment: i,
                eval_start,
                eval_end: eval_start + config.delta_ms,
                train_cutoff,
                model,
            }
        })
        .collect();
    Ok(EvalPlan { steps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementResult {
    pub increment: usize,
    pub start_ts: i64,
    pub instances: usize,
    pub positives: usize,
    /// `None` when the increment lacks a positive or a negative label.
    pub auc: Option<f64>,
    pub model_version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub config: EvalConfig,
    pub increments: Vec<IncrementResult>,
    /// AUC over the pooled scores of every increment.
    pub aggregate_auc: f64,
    /// Increments whose AUC is undefined.
    pub degenerate: Vec<usize>,
    /// Incremental updates that failed and left the entity unchanged.
    pub failed_updates: usize,
}

impl EvalResult {
    pub fn auc_series(&self) -> Vec<Option<f64>> {
        self.increments.iter().map(|r| r.auc).collect()
    }

    /// `increment,start_ts,auc,model_version`; undefined AUCs are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["increment", "start_ts", "auc", "model_version"])
            .map_err(csv_err)?;
        for r in &self.increments {
            w.write_record([
                r.increment.to_string(),
                r.start_ts.to_string(),
                r.auc.map(|a| a.to_string()).unwrap_or_default(),
                r.model_version.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv output: {e}"))
}

fn check_sorted(instances: &[Instance]) -> Result<()> {
    match instances.windows(2).position(|w| w[1].ts < w[0].ts) {
        Some(p) => Err(Error::InvalidInput(format!(
            "instances are not sorted by timestamp at position {}",
            p + 1
        ))),
        None => Ok(()),
    }
}

/// Cold-part model: full backfitting on every instance before the warm start.
pub fn train_initial(instances: &[Instance], schema: &Schema, config: &EvalConfig) -> Result<GameModel> {
    config.validate()?;
    check_sorted(instances)?;
    let cold = &instances[..instances.partition_point(|i| i.ts < config.warm_start_ts)];
    train_batch(cold, schema, &config.trainer, config.rounds)
}

/// Trains the cold model and runs the variant over the warm part.
pub fn run_eval(instances: &[Instance], schema: &Schema, config: &EvalConfig) -> Result<EvalResult> {
    let base = train_initial(instances, schema, config)?;
    run_eval_from(instances, &base, config)
}

/// Runs the variant starting from an already trained cold model.
pub fn run_eval_from(instances: &[Instance], base: &GameModel, config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    check_sorted(instances)?;
    let last = instances.last().ok_or(Error::EmptyTrainingWindow)?.ts;
    let plan = plan_variant(config, last + 1 - config.warm_start_ts)?;

    let mut ll_model = base.clone();
    let mut retrains: Vec<(i64, GameModel)> = Vec::new();
    let mut failed_updates = 0;
    let mut increments = Vec::with_capacity(plan.steps.len());
    let mut degenerate = Vec::new();
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();

    for step in &plan.steps {
        if step.train_cutoff > step.eval_start {
            return Err(Error::InvalidConfig(format!(
                "increment {} would be scored by a model trained up to {}",
                step.increment, step.train_cutoff
            )));
        }
        let lo = instances.partition_point(|i| i.ts < step.eval_start);
        let hi = instances.partition_point(|i| i.ts < step.eval_end);
        let window = &instances[lo..hi];

        let (model, version): (&GameModel, u64) = match step.model {
            ModelSource::Initial => (base, 0),
            ModelSource::Incremental { updates } => (&ll_model, updates as u64),
            ModelSource::Retrain { cutoff } => {
                if retrains.last().is_none_or(|(c, _)| *c != cutoff) {
                    let train = &instances[..instances.partition_point(|i| i.ts < cutoff)];
                    let m = retrain_random_effects(base, train, &config.trainer, config.rounds)?;
                    retrains.push((cutoff, m));
                }
                let (_, m) = retrains.last().expect("pushed above");
                (m, retrains.len() as u64)
            }
        };

        let mut scores = Vec::with_capacity(window.len());
        let mut labels = Vec::with_capacity(window.len());
        for (n, inst) in window.iter().enumerate() {
            let s = match config.sample_seed {
                None => model.score(inst)?,
                Some(seed) => {
                    let seed = derive_seed(seed, &["eval", &step.increment.to_string(), &n.to_string()]);
                    sampled_score(model, inst, &config.trainer, seed)?
                }
            };
            scores.push(s);
            labels.push(inst.label);
        }
        let positives = labels.iter().filter(|&&y| y == 1).count();
        let inc_auc = match auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::DegenerateLabels { .. }) => {
                degenerate.push(step.increment);
                None
            }
            Err(e) => return Err(e),
        };
        increments.push(IncrementResult {
            increment: step.increment,
            start_ts: step.eval_start,
            instances: window.len(),
            positives,
            auc: inc_auc,
            model_version: version,
        });
        pooled_scores.extend(scores);
        pooled_labels.extend(labels);

        if config.variant == Variant::Ll {
            failed_updates += apply_increment(&mut ll_model, window, &config.trainer, step.increment as u64)?;
        }
    }

    Ok(EvalResult {
        config: config.clone(),
        increments,
        aggregate_auc: auc(&pooled_scores, &pooled_labels)?,
        degenerate,
        failed_updates,
    })
}

/// One incremental update per entity seen in `window`, in key order, each
/// with offsets from the model as updated so far. Returns the number of
/// entities whose solve failed; their posteriors are left untouched.
pub fn apply_increment(model: &mut GameModel, window: &[Instance], config: &TrainerConfig, seq: u64) -> Result<usize> {
    let mut groups: BTreeMap<ReKey, Vec<Instance>> = BTreeMap::new();
    for inst in window {
        for a in &inst.re_assignments {
            groups.entry(a.key()).or_default().push(inst.clone());
        }
    }
    let mut failed = 0;
    for (key, insts) in groups {
        let batch = MiniBatch::new(&key, insts, seq)?;
        let offsets = compute_offsets(&*model, &batch)?;
        let state = match model.state(&key) {
            Some(s) => s.clone(),
            None => CoefficientState::prior(
                model.schema.re_dim(&key.re_type)?,
                model.hessian_mode,
                config.lambda_for(&key.re_type),
            ),
        };
        match incremental_update(&state, &offsets, config) {
            Ok(res) => {
                let mut st = res.state;
                st.last_update_ts = batch.ts();
                model.random_effects.insert(key, st);
            }
            Err(e) if e.is_numerical() => failed += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(failed)
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn linear_slope(ys: &[f64]) -> Option<f64> {
    if ys.len() < 2 {
        return None;
    }
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    Some(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    /// Supplies the increment length, trainer settings and rounds.
    pub base: EvalConfig,
    pub horizon_increments: usize,
    pub n_runs: usize,
    /// Run start times are drawn uniformly from this inclusive range.
    pub start_min_ts: i64,
    pub start_max_ts: i64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub increment: usize,
    pub variant: Variant,
    pub auc_mean: f64,
    /// 95% normal-approximation interval; `None` with fewer than two runs.
    pub ci: Option<(f64, f64)>,
    /// Runs with a defined AUC at this increment.
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayResult {
    pub starts: Vec<i64>,
    pub points: Vec<DecayPoint>,
}

impl DecayResult {
    pub fn curve(&self, variant: Variant) -> Vec<f64> {
        self.points
            .iter()
            .filter(|p| p.variant == variant)
            .map(|p| p.auc_mean)
            .collect()
    }

    /// `increment,variant,auc_mean,ci_lo,ci_hi`; undefined intervals are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["increment", "variant", "auc_mean", "ci_lo", "ci_hi"])
            .map_err(csv_err)?;
        for p in &self.points {
            let (lo, hi) = p.ci.map(|(a, b)| (a.to_string(), b.to_string())).unwrap_or_default();
            w.write_record([
                p.increment.to_string(),
                p.variant.to_string(),
                p.auc_mean.to_string(),
                lo,
                hi,
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn mean_ci(values: &[f64]) -> (f64, Option<(f64, f64)>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, Some((mean - half, mean + half)))
}

/// NU and LL AUC per increment after a fresh cold training at each of
/// `n_runs` random start times, averaged over runs.
pub fn decay_experiment(instances: &[Instance], schema: &Schema, config: &DecayConfig) -> Result<DecayResult> {
    config.base.validate()?;
    if config.n_runs == 0 || config.horizon_increments == 0 {
        return Err(Error::InvalidConfig(
            "decay needs at least one run and one increment".into(),
        ));
    }
    if config.start_min_ts > config.start_max_ts {
        return Err(Error::InvalidConfig("empty start range".into()));
    }
    let last = instances.last().ok_or(Error::EmptyTrainingWindow)?.ts;
    let horizon_ms = config.base.delta_ms * config.horizon_increments as i64;
    if config.start_max_ts + horizon_ms > last + 1 {
        return Err(Error::InvalidConfig(format!(
            "a start at {} leaves less than {} increments of data",
            config.start_max_ts, config.horizon_increments
        )));
    }
    let starts: Vec<i64> = (0..config.n_runs)
        .map(|r| {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, &["decay", &r.to_string()]));
            rng.random_range(config.start_min_ts..=config.start_max_ts)
        })
        .collect();

    let runs: Vec<[Vec<Option<f64>>; 2]> = starts
        .par_iter()
        .map(|&start| {
            let mut cfg = config.base.clone();
            cfg.warm_start_ts = start;
            cfg.tau_ms = 0;
            cfg.max_increments = Some(config.horizon_increments);
            cfg.variant = Variant::Nu;
            let base = train_initial(instances, schema, &cfg)?;
            let nu = run_eval_from(instances, &base, &cfg)?.auc_series();
            cfg.variant = Variant::Ll;
            let ll = run_eval_from(instances, &base, &cfg)?.auc_series();
            Ok([nu, ll])
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    for (v, variant) in [Variant::Nu, Variant::Ll].into_iter().enumerate() {
        for i in 0..config.horizon_increments {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r[v].get(i).copied().flatten()).collect();
            if vals.is_empty() {
                continue;
            }
            let (auc_mean, ci) = mean_ci(&vals);
            points.push(DecayPoint {
                increment: i,
                variant,
                auc_mean,
                ci,
                runs: vals.len(),
            });
        }
    }
    Ok(DecayResult { starts, points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub delta: f64,
    pub delta_ms: i64,
    pub auc_raw: f64,
    /// z-score within the cell's `delta_ms` column; `None` when the column
    /// has a single cell or no spread.
    pub auc_scaled: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Sorted by `(delta, delta_ms)`.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// The forgetting factor with the best raw AUC for one increment length;
    /// the smallest such factor on ties.
    pub fn best_delta(&self, delta_ms: i64) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.delta_ms == delta_ms)
            .fold(None, |best: Option<&SweepCell>, c| match best {
                Some(b) if b.auc_raw >= c.auc_raw => Some(b),
                _ => Some(c),
            })
            .map(|c| c.delta)
    }

    /// `delta,Delta,auc_raw,auc_scaled`; undefined scaled values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["delta", "Delta", "auc_raw", "auc_scaled"])
            .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                c.delta.to_string(),
                c.delta_ms.to_string(),
                c.auc_raw.to_string(),
                c.auc_scaled.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Aggregate LL AUC for every `(forgetting factor, increment length)` pair,
/// all starting from one cold model.
pub fn delta_sweep(
    instances: &[Instance],
    schema: &Schema,
    base: &EvalConfig,
    deltas: &[f64],
    increment_lengths_ms: &[i64],
) -> Result<SweepResult> {
    if deltas.is_empty() || increment_lengths_ms.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
    }
    let mut grid: Vec<(f64, i64)> = deltas
        .iter()
        .flat_map(|&d| increment_lengths_ms.iter().map(move |&l| (d, l)))
        .collect();
    grid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    grid.dedup();

    let mut cfg = base.clone();
    cfg.variant = Variant::Ll;
    cfg.tau_ms = 0;
    let model0 = train_initial(instances, schema, &cfg)?;
    let raw: Vec<f64> = grid
        .par_iter()
        .map(|&(delta, len)| {
            let mut c = cfg.clone();
            c.trainer.delta = delta;
            c.delta_ms = len;
            run_eval_from(instances, &model0, &c).map(|r| r.aggregate_auc)
        })
        .collect::<Result<_>>()?;

    let mut columns: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (&(_, len), &a) in grid.iter().zip(&raw) {
        columns.entry(len).or_default().push(a);
    }
    let stats: BTreeMap<i64, Option<(f64, f64)>> = columns
        .into_iter()
        .map(|(len, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            (len, (v.len() > 1 && sd > 0.0).then_some((mean, sd)))
        })
        .collect();
    let cells = grid
        .into_iter()
        .zip(raw)
        .map(|((delta, len), auc_raw)| SweepCell {
            delta,
            delta_ms: len,
            auc_raw,
            auc_scaled: stats[&len].map(|(m, s)| (auc_raw - m) / s),
        })
        .collect();
    Ok(SweepResult { cells })
}

/// One entity's data split into the initial window and later mini-batches.
#[derive(Clone, Debug)]
pub struct TheoremProblem {
    pub dim: usize,
    pub initial: Vec<OffsetInstance>,
    pub batches: Vec<Vec<OffsetInstance>>,
}

impl TheoremProblem {
    /// A seeded random problem: dimension 1 to 4, a logistic ground truth,
    /// 10 to 50 initial instances and 1 to 5 later batches of 1 to 20.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &["theorem-problem"]));
        let dim = rng.random_range(1..=4);
        let truth: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let batch = |rng: &mut ChaCha20Rng, n: usize| -> Vec<OffsetInstance> {
            (0..n)
                .map(|_| {
                    let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
                    let p = loss::sigmoid(linalg::dot(&z, &truth));
                    let y = u8::from(rng.random::<f64>() < p);
                    OffsetInstance::new(0.0, SparseVector::from_dense(&z), y).expect("finite features")
                })
                .collect()
        };
        let n0 = rng.random_range(10..=50);
        let initial = batch(&mut rng, n0);
        let n_batches = rng.random_range(1..=5);
        let batches = (0..n_batches)
            .map(|_| {
                let n = rng.random_range(1..=20);
                batch(&mut rng, n)
            })
            .collect();
        Self { dim, initial, batches }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub t: usize,
    /// `F_t(b_0) - F_t(b_t)`.
    pub gap: f64,
    /// `(lambda/2) ||b_0 - b_t||^2`.
    pub bound: f64,
    /// Largest distance between any two iterates `b_0..b_t`.
    pub gamma_bar: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// Constant on the cubic remainder.
    pub c: f64,
    pub rows: Vec<TheoremRow>,
}

impl TheoremReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// `t,gap,bound,gamma_bar,pass`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_theorem_rows(self.rows.iter(), out)
    }
}

pub fn write_theorem_rows<'a, W: Write>(rows: impl Iterator<Item = &'a TheoremRow>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "gap", "bound", "gamma_bar", "pass"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.gap.to_string(),
            r.bound.to_string(),
            r.gamma_bar.to_string(),
            r.pass.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Default constant on the `gamma_bar^3` remainder.
pub const THEOREM_C: f64 = 10.0;

fn add_ridge(h: &HessianStore, lambda: f64) -> HessianStore {
    match h {
        HessianStore::Diagonal(d) => HessianStore::Diagonal(d.iter().map(|v| v + lambda).collect()),
        full @ HessianStore::Full { dim, .. } => {
            let mut a = full.to_dense();
            for i in 0..*dim {
                a[i * dim + i] += lambda;
            }
            HessianStore::full_from_dense(&a, *dim)
        }
    }
}

/// Checks `F_t(b_0) - F_t(b_t) >= (lambda/2)||b_0 - b_t||^2 - c gamma_bar^3`
/// for every step of an incremental chain.
///
/// `F_t = sum_k delta^{t-k} (loss_k + (lambda/2)||.||^2)` with the initial
/// window as batch 0, and `b_0` its exact minimizer. The chain is the one the
/// inequalities are stated for: the carried curvature includes the prior of
/// every batch, `G_t = delta G_{t-1} + curvature_t + lambda I`, unlike the
/// production update which keeps `lambda` out of the stored Hessian.
pub fn theorem_gap_check(problem: &TheoremProblem, config: &TrainerConfig, c: f64) -> Result<TheoremReport> {
    config.validate()?;
    let d = problem.dim;
    let lambda = config.lambda;
    let mode = config.hessian_mode;
    let zero = vec![0.0; d];
    let zero_h = HessianStore::zeros(mode, d);
    let b0 = per_entity_solve(
        &EntityProblem {
            batch: &problem.initial,
            prior_mean: &zero,
            prior_hessian: &zero_h,
            prior_weight: 0.0,
            lambda,
        },
        config,
        None,
    )?;
    let mut iterates = vec![b0.mean.clone()];
    let mut g = add_ridge(&b0.hessian, lambda);

    let batch_losses = |beta: &[f64], t: usize| -> Result<f64> {
        let ridge = 0.5 * lambda * linalg::dot(beta, beta);
        let mut total = config.delta.powi(t as i32) * (loss::logloss(&problem.initial, beta)? + ridge);
        for (k, b) in problem.batches[..t].iter().enumerate() {
            total += config.delta.powi((t - k - 1) as i32) * (loss::logloss(b, beta)? + ridge);
        }
        Ok(total)
    };

    let mut rows = Vec::with_capacity(problem.batches.len());
    for (k, batch) in problem.batches.iter().enumerate() {
        let t = k + 1;
        let prev = iterates.last().expect("starts non-empty").clone();
        let out = per_entity_solve(
            &EntityProblem {
                batch,
                prior_mean: &prev,
                prior_hessian: &g,
                prior_weight: config.delta,
                lambda,
            },
            config,
            Some(&prev),
        )?;
        g = add_ridge(&out.hessian, lambda);
        iterates.push(out.mean);

        let bt = &iterates[t];
        let f0 = batch_losses(&iterates[0], t)?;
        let ft = batch_losses(bt, t)?;
        let gap = f0 - ft;
        let diff: Vec<f64> = iterates[0].iter().zip(bt).map(|(a, b)| a - b).collect();
        let bound = 0.5 * lambda * linalg::dot(&diff, &diff);
        let mut gamma_bar: f64 = 0.0;
        for i in 0..=t {
            for j in i + 1..=t {
                let dij: Vec<f64> = iterates[i].iter().zip(&iterates[j]).map(|(a, b)| a - b).collect();
                gamma_bar = gamma_bar.max(linalg::norm(&dij));
            }
        }
        // both sides of the gap are sums of O(|F|) terms
        let rounding = 64.0 * f64::EPSILON * (f0.abs() + ft.abs());
        rows.push(TheoremRow {
            t,
            gap,
            bound,
            gamma_bar,
            pass: gap + rounding >= bound - c * gamma_bar.powi(3),
        });
    }
    Ok(TheoremReport { c, rows })
}
