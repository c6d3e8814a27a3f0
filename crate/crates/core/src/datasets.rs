//! Data preparation: the ratings-to-instances pipeline (binarized labels,
//! ALS latent item features, compressed time) and a seeded synthetic stream
//! whose per-entity ground truth drifts at a known point.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::sigmoid;
use crate::model::{Instance, ReAssignment, Schema, SparseVector};
use crate::sampler::derive_seed;

pub const FOURTEEN_DAYS_MS: i64 = 14 * 24 * 3600 * 1000;
pub const HOUR_MS: i64 = 3600 * 1000;
pub const USER_TYPE: &str = "user";

pub fn binarize(rating: f64) -> u8 {
    u8::from(rating >= 4.0)
}

/// Linear map of `[t_min, t_max]` onto `[0, target_span_ms]`, rounded.
pub fn compress_time(ts: i64, t_min: i64, t_max: i64, target_span_ms: i64) -> Result<i64> {
    if t_min >= t_max {
        return Err(Error::InvalidInput(format!("empty time range [{t_min}, {t_max}]")));
    }
    if ts < t_min || ts > t_max {
        return Err(Error::InvalidInput(format!(
            "timestamp {ts} outside [{t_min}, {t_max}]"
        )));
    }
    let num = (ts - t_min) as i128 * target_span_ms as i128;
    let den = (t_max - t_min) as i128;
    // round half away from zero on non-negative values
    Ok(((2 * num + den) / (2 * den)) as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: u64,
    pub item: u64,
    pub rating: f64,
    /// Seconds, as in the public ratings files.
    pub ts: i64,
}

/// Reads `userId,movieId,rating,timestamp` CSV (header required).
pub fn read_ratings_csv(path: &Path) -> Result<Vec<Rating>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_ratings(file, &path.display().to_string())
}

pub fn parse_ratings<R: Read>(reader: R, name: &str) -> Result<Vec<Rating>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let err = |message: String| Error::Parse {
            path: name.to_string(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() < 4 {
            return Err(err(format!("expected 4 fields, got {}", rec.len())));
        }
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let user = field(0)
            .parse()
            .map_err(|_| err(format!("bad userId {:?}", field(0))))?;
        let item = field(1)
            .parse()
            .map_err(|_| err(format!("bad movieId {:?}", field(1))))?;
        let rating: f64 = field(2)
            .parse()
            .map_err(|_| err(format!("bad rating {:?}", field(2))))?;
        if !rating.is_finite() {
            return Err(err("non-finite rating".into()));
        }
        let ts = field(3)
            .parse()
            .map_err(|_| err(format!("bad timestamp {:?}", field(3))))?;
        out.push(Rating { user, item, rating, ts });
    }
    Ok(out)
}

pub fn write_ratings_csv<W: std::io::Write>(ratings: &[Rating], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::InvalidInput(e.to_string());
    w.write_record(["userId", "movieId", "rating", "timestamp"])
        .map_err(csv_err)?;
    for r in ratings {
        w.write_record([
            r.user.to_string(),
            r.item.to_string(),
            format!("{:.1}", r.rating),
            r.ts.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("ratings csv", e))?;
    Ok(())
}

/// One JSON instance per line.
pub fn write_instances_jsonl<W: std::io::Write>(instances: &[Instance], mut out: W) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n").map_err(|e| Error::io("instances", e))?;
    }
    out.flush().map_err(|e| Error::io("instances", e))
}

pub fn read_instances_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_instances_jsonl(std::io::BufReader::new(file), &path.display().to_string())
}

/// Parses JSON lines, skipping blank ones; instances must be in time order.
pub fn parse_instances_jsonl<R: std::io::BufRead>(reader: R, name: &str) -> Result<Vec<Instance>> {
    let mut out: Vec<Instance> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: name.to_string(),
            line: n + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if out.last().is_some_and(|prev| prev.ts > inst.ts) {
            return Err(err(format!("timestamp {} is earlier than the previous line", inst.ts)));
        }
        out.push(inst);
    }
    Ok(out)
}

/// Keeps ratings of the `max_users` most active users and `max_items` most
/// rated items (ties broken by smaller id).
pub fn subsample(ratings: &[Rating], max_users: Option<usize>, max_items: Option<usize>) -> Vec<Rating> {
    fn top(counts: HashMap<u64, usize>, cap: Option<usize>) -> Option<BTreeSet<u64>> {
        let cap = cap?;
        let mut v: Vec<(u64, usize)> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Some(v.into_iter().take(cap).map(|(id, _)| id).collect())
    }
    let mut items: HashMap<u64, usize> = HashMap::new();
    for r in ratings {
        *items.entry(r.item).or_default() += 1;
    }
    let keep_items = top(items, max_items);
    let after_items: Vec<&Rating> = ratings
        .iter()
        .filter(|r| keep_items.as_ref().is_none_or(|s| s.contains(&r.item)))
        .collect();
    let mut users: HashMap<u64, usize> = HashMap::new();
    for r in &after_items {
        *users.entry(r.user).or_default() += 1;
    }
    let keep_users = top(users, max_users);
    after_items
        .into_iter()
        .filter(|r| keep_users.as_ref().is_none_or(|s| s.contains(&r.user)))
        .cloned()
        .collect()
}

/// Row-major factor matrices from alternating least squares.
#[derive(Clone, Debug, PartialEq)]
pub struct AlsFactors {
    pub rank: usize,
    pub user: Vec<f64>,
    pub item: Vec<f64>,
}

impl AlsFactors {
    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.user[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.item[i * self.rank..(i + 1) * self.rank]
    }
}

/// Observed entry `(row, col, value)` of a sparse user x item matrix.
pub type Entry = (usize, usize, f64);

/// `sum_observed (r - p.q)^2 + reg (||P||^2 + ||Q||^2)`.
pub fn als_objective(entries: &[Entry], f: &AlsFactors, reg: f64) -> f64 {
    let fit: f64 = entries
        .iter()
        .map(|&(u, i, r)| {
            let e = r - linalg::dot(f.user_row(u), f.item_row(i));
            e * e
        })
        .sum();
    fit + reg * (linalg::dot(&f.user, &f.user) + linalg::dot(&f.item, &f.item))
}

pub fn als_init(n_users: usize, n_items: usize, rank: usize, seed: u64) -> AlsFactors {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &["als-init"]));
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let user = (0..n_users * rank).map(|_| normal.sample(&mut rng)).collect();
    let item = (0..n_items * rank).map(|_| normal.sample(&mut rng)).collect();
    AlsFactors { rank, user, item }
}

#[derive(Clone, Debug)]
pub struct AlsRun {
    pub factors: AlsFactors,
    /// Objective at init and after every half-iteration (users, then items).
    pub objectives: Vec<f64>,
}

/// Explicit-feedback ALS: alternate exact ridge solves for user rows and item rows.
pub fn als_factorize(
    entries: &[Entry],
    n_users: usize,
    n_items: usize,
    rank: usize,
    reg: f64,
    iters: usize,
    seed: u64,
) -> Result<AlsRun> {
    if rank == 0 {
        return Err(Error::InvalidConfig("rank must be at least 1".into()));
    }
    if !(reg > 0.0) {
        return Err(Error::InvalidConfig("ALS regularization must be positive".into()));
    }
    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_users];
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_items];
    for &(u, i, r) in entries {
        if u >= n_users || i >= n_items {
            return Err(Error::DimensionMismatch(format!(
                "entry ({u}, {i}) outside {n_users}x{n_items}"
            )));
        }
        by_user[u].push((i, r));
        by_item[i].push((u, r));
    }
    if let Some(u) = by_user.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("row {u} has no observed entries")));
    }
    if let Some(i) = by_item.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("column {i} has no observed entries")));
    }

    let mut f = als_init(n_users, n_items, rank, seed);
    let mut objectives = vec![als_objective(entries, &f, reg)];
    for _ in 0..iters {
        f.user = ridge_rows(&by_user, &f.item, rank, reg)?;
        objectives.push(als_objective(entries, &f, reg));
        f.item = ridge_rows(&by_item, &f.user, rank, reg)?;
        objectives.push(als_objective(entries, &f, reg));
    }
    Ok(AlsRun { factors: f, objectives })
}

fn ridge_rows(rows: &[Vec<(usize, f64)>], other: &[f64], rank: usize, reg: f64) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let solved: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|obs| {
            let mut a = vec![0.0; rank * rank];
            let mut b = vec![0.0; rank];
            for &(j, r) in obs {
                let q = &other[j * rank..(j + 1) * rank];
                for x in 0..rank {
                    b[x] += r * q[x];
                    for y in 0..=x {
                        a[x * rank + y] += q[x] * q[y];
                    }
                }
            }
            for x in 0..rank {
                for y in 0..x {
                    a[y * rank + x] = a[x * rank + y];
                }
                a[x * rank + x] += reg;
            }
            let l = linalg::cholesky(&a, rank)?;
            Ok(linalg::cholesky_solve(&l, rank, &b))
        })
        .collect::<Result<_>>()?;
    Ok(solved.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovieLensOptions {
    pub rank: usize,
    pub als_reg: f64,
    pub als_iters: usize,
    pub seed: u64,
    pub target_span_ms: i64,
    pub max_users: Option<usize>,
    pub max_items: Option<usize>,
}

impl Default for MovieLensOptions {
    fn default() -> Self {
        Self {
            rank: 30,
            als_reg: 0.1,
            als_iters: 15,
            seed: 0,
            target_span_ms: FOURTEEN_DAYS_MS,
            max_users: None,
            max_items: None,
        }
    }
}

/// Dense latent factors per item id.
pub type ItemFactors = BTreeMap<u64, Vec<f64>>;

/// One instance per rating: binarized label, item factors plus a trailing
/// bias feature as both the fixed-effect and the per-user features, time
/// compressed onto `target_span_ms`. Output is sorted by time (stable).
pub fn build_movielens_instances(
    ratings: &[Rating],
    factors: &ItemFactors,
    rank: usize,
    target_span_ms: i64,
) -> Result<Vec<Instance>> {
    if ratings.is_empty() {
        return Ok(Vec::new());
    }
    let t_min = ratings.iter().map(|r| r.ts).min().expect("non-empty") * 1000;
    let t_max = ratings.iter().map(|r| r.ts).max().expect("non-empty") * 1000;
    let mut out = Vec::with_capacity(ratings.len());
    for r in ratings {
        let q = factors
            .get(&r.item)
            .ok_or_else(|| Error::InvalidInput(format!("unknown item id {}", r.item)))?;
        if q.len() != rank {
            return Err(Error::DimensionMismatch(format!(
                "item {} has {} factors, rank {rank}",
                r.item,
                q.len()
            )));
        }
        let x = SparseVector::from_pairs(q.iter().copied().enumerate().chain(std::iter::once((rank, 1.0))));
        let ts = if t_max > t_min {
            compress_time(r.ts * 1000, t_min, t_max, target_span_ms)?
        } else {
            0
        };
        out.push(Instance::new(
            ts,
            binarize(r.rating),
            x.clone(),
            vec![ReAssignment::new(USER_TYPE, r.user.to_string(), x)],
        )?);
    }
    out.sort_by_key(|i| i.ts);
    Ok(out)
}

pub fn movielens_schema(rank: usize) -> Schema {
    Schema::new(rank + 1).with_re_type(USER_TYPE, rank + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub instances: usize,
    pub positives: usize,
    pub entities: usize,
    pub first_ts: i64,
    pub last_ts: i64,
    pub seed: u64,
    pub schema: Schema,
}

impl Manifest {
    pub fn describe(source: &str, instances: &[Instance], schema: &Schema, seed: u64) -> Self {
        let entities: BTreeSet<(&str, &str)> = instances
            .iter()
            .flat_map(|i| i.re_assignments.iter().map(|a| (a.re_type.as_str(), a.re_id.as_str())))
            .collect();
        Self {
            source: source.to_string(),
            instances: instances.len(),
            positives: instances.iter().filter(|i| i.label == 1).count(),
            entities: entities.len(),
            first_ts: instances.first().map_or(0, |i| i.ts),
            last_ts: instances.last().map_or(0, |i| i.ts),
            seed,
            schema: schema.clone(),
        }
    }
}

/// Whole ratings-to-instances pipeline: subsample, factorize, build.
pub fn prepare_movielens(ratings: &[Rating], opts: &MovieLensOptions) -> Result<(Vec<Instance>, Schema)> {
    let ratings = subsample(ratings, opts.max_users, opts.max_items);
    let users: BTreeSet<u64> = ratings.iter().map(|r| r.user).collect();
    let items: BTreeSet<u64> = ratings.iter().map(|r| r.item).collect();
    let user_idx: HashMap<u64, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_idx: HashMap<u64, usize> = items.iter().enumerate().map(|(i, &m)| (m, i)).collect();
    let entries: Vec<Entry> = ratings
        .iter()
        .map(|r| (user_idx[&r.user], item_idx[&r.item], r.rating))
        .collect();
    let run = als_factorize(
        &entries,
        users.len(),
        items.len(),
        opts.rank,
        opts.als_reg,
        opts.als_iters,
        opts.seed,
    )?;
    let factors: ItemFactors = items
        .iter()
        .map(|&m| (m, run.factors.item_row(item_idx[&m]).to_vec()))
        .collect();
    let instances = build_movielens_instances(&ratings, &factors, opts.rank, opts.target_span_ms)?;
    Ok((instances, movielens_schema(opts.rank)))
}

/// Ratings-file lookalike for environments without the public dataset:
/// users and items with latent tastes, user tastes drifting over time, users
/// arriving over the whole period and rating in a handful of sessions.
pub fn synth_ratings(n_users: usize, n_items: usize, n_ratings: usize, seed: u64) -> Vec<Rating> {
    const LATENT: usize = 4;
    const START: i64 = 946_684_800; // 2000-01-01
    const SPAN: i64 = 20 * 365 * 24 * 3600;
    const SESSION: f64 = 3.0 * 3600.0;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &["synth-ratings"]));
    let gauss = |rng: &mut ChaCha20Rng| -> f64 { StandardNormal.sample(rng) };
    let items: Vec<(Vec<f64>, f64)> = (0..n_items)
        .map(|_| ((0..LATENT).map(|_| gauss(&mut rng)).collect(), 0.5 * gauss(&mut rng)))
        .collect();
    struct User {
        start: Vec<f64>,
        end: Vec<f64>,
        sessions: Vec<f64>,
    }
    let users: Vec<User> = (0..n_users)
        .map(|_| {
            let start = (0..LATENT).map(|_| 0.6 * gauss(&mut rng)).collect();
            let end = (0..LATENT).map(|_| 0.6 * gauss(&mut rng)).collect();
            let arrival = rng.random::<f64>() * 0.8;
            let n_sessions = rng.random_range(1..=6);
            let sessions = (0..n_sessions)
                .map(|_| arrival + (1.0 - arrival) * rng.random::<f64>())
                .collect();
            User { start, end, sessions }
        })
        .collect();
    // item popularity is skewed so the most-rated cut is meaningful
    let weights: Vec<f64> = (0..n_items).map(|i| 1.0 / (1.0 + i as f64).sqrt()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n_ratings);
    for _ in 0..n_ratings {
        let u = rng.random_range(0..n_users);
        let mut pick = rng.random::<f64>() * total;
        let mut i = 0;
        while i + 1 < n_items && pick > weights[i] {
            pick -= weights[i];
            i += 1;
        }
        let user = &users[u];
        let frac = user.sessions[rng.random_range(0..user.sessions.len())];
        let taste: Vec<f64> = user
            .start
            .iter()
            .zip(&user.end)
            .map(|(a, b)| a + (b - a) * frac)
            .collect();
        let (q, bias) = &items[i];
        let latent = 3.5 + bias + linalg::dot(&taste, q) + 0.5 * gauss(&mut rng);
        let rating = ((latent * 2.0).round() / 2.0).clamp(0.5, 5.0);
        let ts = START + (frac * SPAN as f64 + rng.random::<f64>() * SESSION) as i64;
        out.push(Rating {
            user: u as u64 + 1,
            item: i as u64 + 1,
            rating,
            ts: ts.min(START + SPAN),
        });
    }
    out.sort_by_key(|r| (r.ts, r.user, r.item));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_per_entity: usize,
    /// Fraction of the span at which drift starts.
    pub drift_at: f64,
    /// Length of the truth shift applied at the drift point.
    pub drift_magnitude: f64,
    /// Fraction of the span over which the shift is phased in linearly;
    /// 0 applies it at once.
    pub drift_ramp: f64,
    pub seed: u64,
    /// Random-effect feature dimension, bias included.
    pub dim: usize,
    /// Orthogonal one-hot features instead of dense Gaussian ones.
    pub one_hot: bool,
    pub span_ms: i64,
    pub fixed_scale: f64,
    pub entity_scale: f64,
    /// Entity `e` first appears at a uniform time in `[0, arrival_spread * span)`
    /// and its instances fill the rest of the span; 0 makes every entity
    /// active from the start.
    pub arrival_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_per_entity: 200,
            drift_at: 0.5,
            drift_magnitude: 2.0,
            drift_ramp: 0.0,
            seed: 0,
            dim: 4,
            one_hot: false,
            span_ms: 200 * HOUR_MS,
            fixed_scale: 0.5,
            entity_scale: 1.0,
            arrival_spread: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0 || self.n_per_entity == 0 || self.dim == 0 || self.span_ms <= 0 {
            return Err(Error::InvalidConfig("synthetic stream sizes must be positive".into()));
        }
        if !(self.drift_at > 0.0 && self.drift_at < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "drift_at must be in (0, 1), got {}",
                self.drift_at
            )));
        }
        if !(self.arrival_spread >= 0.0 && self.arrival_spread < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "arrival_spread must be in [0, 1), got {}",
                self.arrival_spread
            )));
        }
        if !(self.drift_magnitude >= 0.0) || !(self.drift_ramp >= 0.0) {
            return Err(Error::InvalidConfig(
                "drift magnitude and ramp must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn drift_ts(&self) -> i64 {
        (self.drift_at * self.span_ms as f64).round() as i64
    }

    /// Fraction of the drift applied at time `ts`.
    pub fn drift_progress(&self, ts: i64) -> f64 {
        let start = self.drift_ts();
        if ts < start {
            0.0
        } else if self.drift_ramp == 0.0 {
            1.0
        } else {
            ((ts - start) as f64 / (self.drift_ramp * self.span_ms as f64)).min(1.0)
        }
    }
}

/// Ground truth behind one synthetic instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub ts: i64,
    pub entity: String,
    pub probability: f64,
    pub label: u8,
}

#[derive(Clone, Debug)]
pub struct SynthStream {
    pub instances: Vec<Instance>,
    /// Parallel to `instances`.
    pub truth: Vec<TruthRecord>,
    pub schema: Schema,
    pub config: SynthConfig,
}

/// Seeded stream of logistic labels from per-entity truth vectors that move
/// by `drift_magnitude` in a random direction from the drift point on.
pub fn synth_drift_stream(cfg: &SynthConfig) -> Result<SynthStream> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut frng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, &["fixed"]));
    let w_fixed: Vec<f64> = (0..d)
        .map(|_| cfg.fixed_scale * Distribution::<f64>::sample(&StandardNormal, &mut frng))
        .collect();

    let mut rows: Vec<(Instance, TruthRecord)> = Vec::with_capacity(cfg.n_entities * cfg.n_per_entity);
    for e in 0..cfg.n_entities {
        let id = format!("e{e}");
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, &["entity", &id]));
        let w: Vec<f64> = (0..d)
            .map(|_| cfg.entity_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let mut dir: Vec<f64> = (0..d)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let n = linalg::norm(&dir).max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v /= n);
        let first = (rng.random::<f64>() * cfg.arrival_spread * cfg.span_ms as f64) as i64;
        let mut times: Vec<i64> = (0..cfg.n_per_entity)
            .map(|_| rng.random_range(first..cfg.span_ms))
            .collect();
        times.sort_unstable();
        for ts in times {
            let z: Vec<f64> = if cfg.one_hot {
                let mut v = vec![0.0; d];
                v[rng.random_range(0..d)] = 1.0;
                v
            } else {
                let mut v: Vec<f64> = (0..d - 1).map(|_| StandardNormal.sample(&mut rng)).collect();
                v.push(1.0);
                v
            };
            let shift = cfg.drift_magnitude * cfg.drift_progress(ts);
            let margin: f64 = (0..d).map(|j| z[j] * (w_fixed[j] + w[j] + shift * dir[j])).sum();
            let p = sigmoid(margin);
            let label = u8::from(rng.random::<f64>() < p);
            let features = SparseVector::from_dense(&z);
            let inst = Instance::new(
                ts,
                label,
                features.clone(),
                vec![ReAssignment::new(USER_TYPE, id.clone(), features)],
            )?;
            rows.push((
                inst,
                TruthRecord {
                    ts,
                    entity: id.clone(),
                    probability: p,
                    label,
                },
            ));
        }
    }
    rows.sort_by(|a, b| a.0.ts.cmp(&b.0.ts).then_with(|| a.1.entity.cmp(&b.1.entity)));
    let (instances, truth) = rows.into_iter().unzip();
    Ok(SynthStream {
        instances,
        truth,
        schema: Schema::new(d).with_re_type(USER_TYPE, d),
        config: cfg.clone(),
    })
}
