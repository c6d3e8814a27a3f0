//! Domain types shared by every other module: sparse feature vectors,
//! labelled instances, per-entity coefficient posteriors and the additive
//! mixed-effect model that scores them.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg;

/// Canonical sparse vector: strictly increasing indices, no stored zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the canonical form from arbitrary pairs: sorted by index,
    /// duplicates summed, zeros dropped.
    pub fn from_pairs<I: IntoIterator<Item = (usize, f64)>>(pairs: I) -> Self {
        let mut raw: Vec<(usize, f64)> = pairs.into_iter().collect();
        raw.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
        for (i, v) in raw {
            match entries.last_mut() {
                Some((last, acc)) if *last == i => *acc += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        Self { entries }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self::from_pairs(values.iter().copied().enumerate())
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|&(i, _)| i)
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.max_index() {
            Some(i) if i >= dim => Err(Error::DimensionMismatch(format!(
                "feature index {i} out of range for dimension {dim}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn dot(&self, w: &[f64]) -> Result<f64> {
        self.check_dim(w.len())?;
        Ok(self.entries.iter().map(|&(i, v)| v * w[i]).sum())
    }

    pub fn to_dense(&self, dim: usize) -> Result<Vec<f64>> {
        self.check_dim(dim)?;
        let mut out = vec![0.0; dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        Ok(out)
    }
}

/// Free-function form of [`SparseVector::dot`].
pub fn dot(v: &SparseVector, w: &[f64]) -> Result<f64> {
    v.dot(w)
}

impl Serialize for SparseVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (i, v) in &self.entries {
            map.serialize_entry(&i.to_string(), v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for SparseVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct SparseVisitor;

        impl<'de> Visitor<'de> for SparseVisitor {
            type Value = SparseVector;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping feature indices to values")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
                let mut pairs = Vec::new();
                while let Some((key, value)) = access.next_entry::<String, f64>()? {
                    let idx: usize = key
                        .parse()
                        .map_err(|_| de::Error::custom(format!("bad feature index {key:?}")))?;
                    if !value.is_finite() {
                        return Err(de::Error::custom(format!("non-finite value at index {idx}")));
                    }
                    pairs.push((idx, value));
                }
                Ok(SparseVector::from_pairs(pairs))
            }
        }

        deserializer.deserialize_map(SparseVisitor)
    }
}

/// Key of one random-effect model: type `r` and id `l`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReKey {
    #[serde(rename = "type")]
    pub re_type: String,
    #[serde(rename = "id")]
    pub re_id: String,
}

impl ReKey {
    pub fn new(re_type: impl Into<String>, re_id: impl Into<String>) -> Self {
        Self {
            re_type: re_type.into(),
            re_id: re_id.into(),
        }
    }
}

impl fmt::Display for ReKey {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{}:{}", self.re_type, self.re_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReAssignment {
    #[serde(rename = "type")]
    pub re_type: String,
    #[serde(rename = "id")]
    pub re_id: String,
    #[serde(rename = "z")]
    pub features: SparseVector,
}

impl ReAssignment {
    pub fn new(re_type: impl Into<String>, re_id: impl Into<String>, features: SparseVector) -> Self {
        Self {
            re_type: re_type.into(),
            re_id: re_id.into(),
            features,
        }
    }

    pub fn key(&self) -> ReKey {
        ReKey::new(self.re_type.clone(), self.re_id.clone())
    }
}

/// One labelled observation. Wire form is a single JSON Lines record:
/// `{"ts": ms, "label": 0|1, "x": {...}, "re": [{"type", "id", "z"}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceWire", into = "InstanceWire")]
pub struct Instance {
    pub ts: i64,
    pub label: u8,
    pub fixed_features: SparseVector,
    pub re_assignments: Vec<ReAssignment>,
}

#[derive(Serialize, Deserialize)]
struct InstanceWire {
    ts: i64,
    label: u8,
    x: SparseVector,
    #[serde(default)]
    re: Vec<ReAssignment>,
}

impl TryFrom<InstanceWire> for Instance {
    type Error = Error;

    fn try_from(w: InstanceWire) -> Result<Self> {
        Instance::new(w.ts, w.label, w.x, w.re)
    }
}

impl From<Instance> for InstanceWire {
    fn from(i: Instance) -> Self {
        InstanceWire {
            ts: i.ts,
            label: i.label,
            x: i.fixed_features,
            re: i.re_assignments,
        }
    }
}

impl Instance {
    pub fn new(ts: i64, label: u8, fixed_features: SparseVector, re_assignments: Vec<ReAssignment>) -> Result<Self> {
        if label > 1 {
            return Err(Error::InvalidInput(format!("label must be 0 or 1, got {label}")));
        }
        for (i, a) in re_assignments.iter().enumerate() {
            if re_assignments[..i].iter().any(|b| b.re_type == a.re_type) {
                return Err(Error::InvalidInput(format!(
                    "random-effect type {:?} assigned twice",
                    a.re_type
                )));
            }
        }
        Ok(Self {
            ts,
            label,
            fixed_features,
            re_assignments,
        })
    }

    pub fn assignment(&self, re_type: &str) -> Option<&ReAssignment> {
        self.re_assignments.iter().find(|a| a.re_type == re_type)
    }

    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }
}

/// Declared feature dimensions: one for the fixed effect, one per
/// random-effect type. Indices outside these are hard errors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub fixed_dim: usize,
    pub re_dims: BTreeMap<String, usize>,
}

impl Schema {
    pub fn new(fixed_dim: usize) -> Self {
        Self {
            fixed_dim,
            re_dims: BTreeMap::new(),
        }
    }

    pub fn with_re_type(mut self, re_type: impl Into<String>, dim: usize) -> Self {
        self.re_dims.insert(re_type.into(), dim);
        self
    }

    pub fn re_dim(&self, re_type: &str) -> Result<usize> {
        self.re_dims
            .get(re_type)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown random-effect type {re_type:?}")))
    }

    pub fn validate(&self, inst: &Instance) -> Result<()> {
        inst.fixed_features.check_dim(self.fixed_dim)?;
        for a in &inst.re_assignments {
            a.features.check_dim(self.re_dim(&a.re_type)?)?;
        }
        Ok(())
    }

    /// Smallest schema that admits every instance.
    pub fn infer<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut schema = Schema::new(0);
        for inst in instances {
            let fd = inst.fixed_features.max_index().map_or(0, |i| i + 1);
            schema.fixed_dim = schema.fixed_dim.max(fd);
            for a in &inst.re_assignments {
                let d = a.features.max_index().map_or(0, |i| i + 1);
                let e = schema.re_dims.entry(a.re_type.clone()).or_insert(0);
                *e = (*e).max(d);
            }
        }
        schema
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HessianMode {
    #[default]
    Full,
    Diagonal,
}

impl std::str::FromStr for HessianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(HessianMode::Full),
            "diag" | "diagonal" => Ok(HessianMode::Diagonal),
            other => Err(Error::InvalidConfig(format!("unknown hessian mode {other:?}"))),
        }
    }
}

/// Accumulated data curvature `H`, never including the `lambda I` term.
///
/// Full mode keeps the row-major packed lower triangle; diagonal mode keeps
/// only the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub enum HessianStore {
    Full { dim: usize, lower: Vec<f64> },
    Diagonal(Vec<f64>),
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

impl HessianStore {
    pub fn zeros(mode: HessianMode, dim: usize) -> Self {
        match mode {
            HessianMode::Full => HessianStore::Full {
                dim,
                lower: vec![0.0; dim * (dim + 1) / 2],
            },
            HessianMode::Diagonal => HessianStore::Diagonal(vec![0.0; dim]),
        }
    }

    /// Full store from a dense symmetric row-major matrix (lower half read).
    pub fn full_from_dense(a: &[f64], dim: usize) -> Self {
        let mut lower = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                lower.push(a[i * dim + j]);
            }
        }
        HessianStore::Full { dim, lower }
    }

    pub fn mode(&self) -> HessianMode {
        match self {
            HessianStore::Full { .. } => HessianMode::Full,
            HessianStore::Diagonal(_) => HessianMode::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            HessianStore::Full { dim, .. } => *dim,
            HessianStore::Diagonal(d) => d.len(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            HessianStore::Full { lower, .. } => {
                let (a, b) = if i >= j { (i, j) } else { (j, i) };
                lower[tri(a, b)]
            }
            HessianStore::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
        }
    }

    /// Raw stored values (packed lower triangle or diagonal).
    pub fn raw(&self) -> &[f64] {
        match self {
            HessianStore::Full { lower, .. } => lower,
            HessianStore::Diagonal(d) => d,
        }
    }

    fn raw_mut(&mut self) -> &mut [f64] {
        match self {
            HessianStore::Full { lower, .. } => lower,
            HessianStore::Diagonal(d) => d,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.raw_mut().iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn add_assign(&mut self, other: &HessianStore) -> Result<()> {
        if self.mode() != other.mode() || self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot add {:?}/{} store to {:?}/{} store",
                other.mode(),
                other.dim(),
                self.mode(),
                self.dim()
            )));
        }
        for (a, b) in self.raw_mut().iter_mut().zip(other.raw()) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `w * z z^T` (only its diagonal in diagonal mode).
    pub fn add_outer(&mut self, weight: f64, z: &SparseVector) {
        match self {
            HessianStore::Full { lower, .. } => {
                let e = z.entries();
                for (a, &(i, vi)) in e.iter().enumerate() {
                    for &(j, vj) in &e[..=a] {
                        lower[tri(i, j)] += weight * vi * vj;
                    }
                }
            }
            HessianStore::Diagonal(d) => {
                for &(i, v) in z.entries() {
                    d[i] += weight * v * v;
                }
            }
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        match self {
            HessianStore::Full { lower, .. } => {
                let mut out = vec![0.0; n];
                for i in 0..n {
                    for j in 0..i {
                        let h = lower[tri(i, j)];
                        out[i] += h * v[j];
                        out[j] += h * v[i];
                    }
                    out[i] += lower[tri(i, i)] * v[i];
                }
                out
            }
            HessianStore::Diagonal(d) => d.iter().zip(v).map(|(h, x)| h * x).collect(),
        }
    }

    /// `v^T H v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        linalg::dot(v, &self.mul_vec(v))
    }

    /// Dense row-major copy, zeros off the diagonal in diagonal mode.
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

    /// Positive semidefinite within `-1e-8 * trace` on the smallest
    /// eigenvalue (full) or non-negative entries (diagonal).
    pub fn is_psd(&self) -> bool {
        match self {
            HessianStore::Diagonal(d) => d.iter().all(|&v| v >= 0.0),
            HessianStore::Full { dim, .. } => {
                let ev = linalg::symmetric_eigenvalues(&self.to_dense(), *dim);
                let floor = -1e-8 * self.trace().abs().max(f64::MIN_POSITIVE);
                ev.iter().all(|&e| e >= floor)
            }
        }
    }

    pub fn max_abs_diff(&self, other: &HessianStore) -> f64 {
        let n = self.dim().max(other.dim());
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = if i < self.dim() && j < self.dim() {
                    self.get(i, j)
                } else {
                    f64::NAN
                };
                let b = if i < other.dim() && j < other.dim() {
                    other.get(i, j)
                } else {
                    f64::NAN
                };
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Posterior of one random-effect model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateWire", into = "StateWire")]
pub struct CoefficientState {
    pub mean: Vec<f64>,
    pub hessian: HessianStore,
    pub lambda: f64,
    pub version: u64,
    pub last_update_ts: i64,
}

#[derive(Serialize, Deserialize)]
struct StateWire {
    mean: Vec<f64>,
    hessian_mode: HessianMode,
    hessian: Vec<f64>,
    lambda: f64,
    version: u64,
    last_update_ts: i64,
}

impl TryFrom<StateWire> for CoefficientState {
    type Error = Error;

    fn try_from(w: StateWire) -> Result<Self> {
        let dim = w.mean.len();
        let hessian = match w.hessian_mode {
            HessianMode::Full => {
                if w.hessian.len() != dim * (dim + 1) / 2 {
                    return Err(Error::DimensionMismatch(format!(
                        "full hessian of dim {dim} needs {} packed entries, got {}",
                        dim * (dim + 1) / 2,
                        w.hessian.len()
                    )));
                }
                HessianStore::Full { dim, lower: w.hessian }
            }
            HessianMode::Diagonal => {
                if w.hessian.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "diagonal hessian of dim {dim} has {} entries",
                        w.hessian.len()
                    )));
                }
                HessianStore::Diagonal(w.hessian)
            }
        };
        if !(w.lambda > 0.0) {
            return Err(Error::InvalidInput(format!(
                "lambda must be positive, got {}",
                w.lambda
            )));
        }
        Ok(CoefficientState {
            mean: w.mean,
            hessian,
            lambda: w.lambda,
            version: w.version,
            last_update_ts: w.last_update_ts,
        })
    }
}

impl From<CoefficientState> for StateWire {
    fn from(s: CoefficientState) -> Self {
        let hessian_mode = s.hessian.mode();
        let hessian = match s.hessian {
            HessianStore::Full { lower, .. } => lower,
            HessianStore::Diagonal(d) => d,
        };
        StateWire {
            mean: s.mean,
            hessian_mode,
            hessian,
            lambda: s.lambda,
            version: s.version,
            last_update_ts: s.last_update_ts,
        }
    }
}

impl CoefficientState {
    /// Fresh entity: zero mean, zero data curvature, i.e. the `N(0, 1/lambda)` prior.
    pub fn prior(dim: usize, mode: HessianMode, lambda: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            hessian: HessianStore::zeros(mode, dim),
            lambda,
            version: 0,
            last_update_ts: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Same coefficients and curvature, ignoring bookkeeping fields.
    pub fn same_posterior(&self, other: &CoefficientState) -> bool {
        self.mean == other.mean && self.hessian == other.hessian && self.lambda == other.lambda
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Forgetting factor applied to past-data curvature on every update.
    pub delta: f64,
    pub lambda: f64,
    pub hessian_mode: HessianMode,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Per random-effect type overrides of `lambda`.
    #[serde(default)]
    pub type_lambda: BTreeMap<String, f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            delta: 0.95,
            lambda: 1.0,
            hessian_mode: HessianMode::Full,
            solver_tol: 1e-8,
            solver_max_iter: 100,
            type_lambda: BTreeMap::new(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must be in (0, 1], got {}",
                self.delta
            )));
        }
        if !(self.lambda > 0.0) || self.type_lambda.values().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::InvalidConfig("solver_tol must be positive".into()));
        }
        if self.solver_max_iter == 0 {
            return Err(Error::InvalidConfig("solver_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lambda_for(&self, re_type: &str) -> f64 {
        self.type_lambda.get(re_type).copied().unwrap_or(self.lambda)
    }
}

/// Scoring function of the fixed effect. Only the linear model is provided;
/// richer global models plug in here.
pub trait FixedEffect: Send + Sync {
    fn score(&self, x: &SparseVector) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinearFixedEffect {
    pub coeffs: Vec<f64>,
}

impl FixedEffect for LinearFixedEffect {
    fn score(&self, x: &SparseVector) -> Result<f64> {
        x.dot(&self.coeffs)
    }
}

/// Anything that can produce the additive pieces of an instance score.
pub trait ScoreSource {
    fn fixed_score(&self, x: &SparseVector) -> Result<f64>;

    /// Contribution of one random-effect assignment at its current mean;
    /// zero for ids the source has never seen.
    fn re_score(&self, assignment: &ReAssignment) -> Result<f64>;

    fn score(&self, inst: &Instance) -> Result<f64> {
        let mut s = self.fixed_score(&inst.fixed_features)?;
        for a in &inst.re_assignments {
            s += self.re_score(a)?;
        }
        Ok(s)
    }
}

/// Fixed-effect coefficients plus one posterior per `(type, id)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelWire", into = "ModelWire")]
pub struct GameModel {
    pub schema: Schema,
    pub hessian_mode: HessianMode,
    pub fixed: LinearFixedEffect,
    pub random_effects: BTreeMap<ReKey, CoefficientState>,
}

#[derive(Serialize, Deserialize)]
struct ModelWire {
    schema: Schema,
    hessian_mode: HessianMode,
    fixed_coeffs: LinearFixedEffect,
    random_effects: Vec<EntityWire>,
}

#[derive(Serialize, Deserialize)]
struct EntityWire {
    #[serde(rename = "type")]
    re_type: String,
    id: String,
    state: CoefficientState,
}

impl TryFrom<ModelWire> for GameModel {
    type Error = Error;

    fn try_from(w: ModelWire) -> Result<Self> {
        if w.fixed_coeffs.coeffs.len() != w.schema.fixed_dim {
            return Err(Error::DimensionMismatch(format!(
                "fixed coefficients have length {}, schema says {}",
                w.fixed_coeffs.coeffs.len(),
                w.schema.fixed_dim
            )));
        }
        let mut random_effects = BTreeMap::new();
        for e in w.random_effects {
            let d = w.schema.re_dim(&e.re_type)?;
            if e.state.dim() != d || e.state.hessian.mode() != w.hessian_mode {
                return Err(Error::DimensionMismatch(format!(
                    "state for {}:{} does not match schema",
                    e.re_type, e.id
                )));
            }
            random_effects.insert(ReKey::new(e.re_type, e.id), e.state);
        }
        Ok(GameModel {
            schema: w.schema,
            hessian_mode: w.hessian_mode,
            fixed: w.fixed_coeffs,
            random_effects,
        })
    }
}

impl From<GameModel> for ModelWire {
    fn from(m: GameModel) -> Self {
        ModelWire {
            schema: m.schema,
            hessian_mode: m.hessian_mode,
            fixed_coeffs: m.fixed,
            random_effects: m
                .random_effects
                .into_iter()
                .map(|(k, state)| EntityWire {
                    re_type: k.re_type,
                    id: k.re_id,
                    state,
                })
                .collect(),
        }
    }
}

impl GameModel {
    pub fn zeros(schema: Schema, hessian_mode: HessianMode) -> Self {
        Self {
            fixed: LinearFixedEffect {
                coeffs: vec![0.0; schema.fixed_dim],
            },
            schema,
            hessian_mode,
            random_effects: BTreeMap::new(),
        }
    }

    pub fn state(&self, key: &ReKey) -> Option<&CoefficientState> {
        self.random_effects.get(key)
    }

    /// `s = x . beta_f + sum_r z_r . beta_{r, id}`; unseen ids contribute zero.
    pub fn score(&self, inst: &Instance) -> Result<f64> {
        ScoreSource::score(self, inst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl ScoreSource for GameModel {
    fn fixed_score(&self, x: &SparseVector) -> Result<f64> {
        x.check_dim(self.schema.fixed_dim)?;
        self.fixed.score(x)
    }

    fn re_score(&self, a: &ReAssignment) -> Result<f64> {
        let d = self.schema.re_dim(&a.re_type)?;
        a.features.check_dim(d)?;
        match self.random_effects.get(&a.key()) {
            Some(state) => a.features.dot(&state.mean),
            None => Ok(0.0),
        }
    }
}

/// Free-function scoring entry point.
pub fn score(model: &GameModel, inst: &Instance) -> Result<f64> {
    model.score(inst)
}
