//! In-process nearline pipeline: per-entity mini-batch assembly, a versioned
//! coefficient store with per-key read-train-write sequencing, a TTL cache in
//! front of a weakly consistent backing map, and replay of recent batches on
//! top of a freshly written batch snapshot.
//!
//! Time never comes from the wall clock. Everything reads a [`SimClock`] so
//! triggers, TTLs and staleness replay deterministically.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::incremental::{incremental_update, posterior_covariance};
use crate::loss::OffsetInstance;
use crate::model::{
    CoefficientState, FixedEffect, GameModel, Instance, LinearFixedEffect, ReAssignment, ReKey, Schema, ScoreSource,
    SparseVector, TrainerConfig,
};

#[derive(Clone, Debug, Default)]
pub struct SimClock(Arc<AtomicI64>);

impl SimClock {
    pub fn new(start_ms: i64) -> Self {
        Self(Arc::new(AtomicI64::new(start_ms)))
    }

    pub fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn set(&self, ms: i64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    /// Moves the clock forward to `ms` if it is behind.
    pub fn advance_to(&self, ms: i64) {
        self.0.fetch_max(ms, Ordering::SeqCst);
    }
}

/// When an entity's accumulated instances are released as a mini-batch.
/// Any criterion that is set can fire.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerPolicy {
    pub max_count: Option<usize>,
    pub max_age_ms: Option<i64>,
    /// Fires while the entity's largest posterior variance is at least this.
    pub variance_threshold: Option<f64>,
}

impl TriggerPolicy {
    pub fn count(n: usize) -> Self {
        Self {
            max_count: Some(n),
            ..Default::default()
        }
    }

    pub fn age(ms: i64) -> Self {
        Self {
            max_age_ms: Some(ms),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_count.is_none() && self.max_age_ms.is_none() && self.variance_threshold.is_none() {
            return Err(Error::InvalidConfig("trigger policy has no criterion".into()));
        }
        if self.max_count == Some(0) || self.max_age_ms.is_some_and(|a| a <= 0) {
            return Err(Error::InvalidConfig("trigger thresholds must be positive".into()));
        }
        if self.variance_threshold.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::InvalidConfig("variance threshold must be positive".into()));
        }
        Ok(())
    }
}

/// All instances of one entity released together.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub re_type: String,
    pub re_id: String,
    /// Sorted by timestamp.
    pub instances: Vec<Instance>,
    pub batch_seq: u64,
}

impl MiniBatch {
    pub fn new(key: &ReKey, mut instances: Vec<Instance>, batch_seq: u64) -> Result<Self> {
        if let Some(bad) = instances
            .iter()
            .find(|i| i.assignment(&key.re_type).is_none_or(|a| a.re_id != key.re_id))
        {
            return Err(Error::InvalidInput(format!(
                "instance at ts {} does not belong to {key}",
                bad.ts
            )));
        }
        instances.sort_by_key(|i| i.ts);
        Ok(Self {
            re_type: key.re_type.clone(),
            re_id: key.re_id.clone(),
            instances,
            batch_seq,
        })
    }

    pub fn key(&self) -> ReKey {
        ReKey::new(self.re_type.clone(), self.re_id.clone())
    }

    /// Timestamp of the newest instance; the batch's position in the stream.
    pub fn ts(&self) -> i64 {
        self.instances.last().map_or(i64::MIN, |i| i.ts)
    }
}

pub trait VarianceSource: Send + Sync {
    /// Largest diagonal entry of the entity's posterior covariance.
    fn max_posterior_variance(&self, key: &ReKey) -> f64;
}

#[derive(Debug)]
struct Accumulator {
    instances: Vec<Instance>,
    first_ts: i64,
}

/// Groups the instance stream into per-entity mini-batches.
pub struct MiniBatcher {
    policy: TriggerPolicy,
    clock: SimClock,
    accumulators: BTreeMap<ReKey, Accumulator>,
    next_seq: u64,
    variance: Option<Arc<dyn VarianceSource>>,
}

impl MiniBatcher {
    pub fn new(policy: TriggerPolicy, clock: SimClock) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            clock,
            accumulators: BTreeMap::new(),
            next_seq: 0,
            variance: None,
        })
    }

    /// Source consulted by the variance trigger.
    pub fn with_variance_source(mut self, source: Arc<dyn VarianceSource>) -> Self {
        self.variance = Some(source);
        self
    }

    pub fn pending(&self) -> usize {
        self.accumulators.values().map(|a| a.instances.len()).sum()
    }

    /// Routes `inst` to one accumulator per random-effect assignment and
    /// returns the batches whose trigger fired.
    pub fn ingest(&mut self, inst: &Instance) -> Vec<MiniBatch> {
        let now = self.clock.now();
        let mut fired = Vec::new();
        for a in &inst.re_assignments {
            let key = a.key();
            let acc = self.accumulators.entry(key.clone()).or_insert_with(|| Accumulator {
                instances: Vec::new(),
                first_ts: inst.ts,
            });
            acc.instances.push(inst.clone());
            if self.should_fire(&key, now) {
                fired.push(self.release(&key));
            }
        }
        fired
    }

    /// Age-based check for every pending accumulator.
    pub fn tick(&mut self) -> Vec<MiniBatch> {
        let now = self.clock.now();
        let due: Vec<ReKey> = self
            .accumulators
            .iter()
            .filter(|(_, acc)| self.policy.max_age_ms.is_some_and(|age| now - acc.first_ts >= age))
            .map(|(k, _)| k.clone())
            .collect();
        due.iter().map(|k| self.release(k)).collect()
    }

    /// Releases everything pending, in key order.
    pub fn flush(&mut self) -> Vec<MiniBatch> {
        let keys: Vec<ReKey> = self.accumulators.keys().cloned().collect();
        keys.iter().map(|k| self.release(k)).collect()
    }

    fn should_fire(&self, key: &ReKey, now: i64) -> bool {
        let acc = &self.accumulators[key];
        if self.policy.max_count.is_some_and(|n| acc.instances.len() >= n) {
            return true;
        }
        if self.policy.max_age_ms.is_some_and(|age| now - acc.first_ts >= age) {
            return true;
        }
        match (self.policy.variance_threshold, &self.variance) {
            (Some(threshold), Some(src)) => src.max_posterior_variance(key) >= threshold,
            _ => false,
        }
    }

    fn release(&mut self, key: &ReKey) -> MiniBatch {
        let acc = self.accumulators.remove(key).expect("released key is pending");
        let seq = self.next_seq;
        self.next_seq += 1;
        MiniBatch::new(key, acc.instances, seq).expect("accumulator only holds matching instances")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// A write becomes visible to backing-store reads this long after it lands.
    pub read_staleness_ms: i64,
    /// TTL of the write-through cache; `None` disables the cache.
    pub ttl_ms: Option<i64>,
}

/// One applied read-train-write, as written to the JSON Lines event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    #[serde(rename = "type")]
    pub re_type: String,
    #[serde(rename = "id")]
    pub re_id: String,
    pub version: u64,
    pub ts: i64,
    pub batch_seq: u64,
    pub read_version: u64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Clone, Debug)]
pub struct DeadLetter {
    pub batch: MiniBatch,
    pub error: String,
}

#[derive(Clone, Debug)]
struct Versioned {
    written_at: i64,
    state: CoefficientState,
}

#[derive(Default)]
struct Slot {
    rtw_lock: Mutex<()>,
    history: Mutex<Vec<Versioned>>,
}

/// Versioned per-entity coefficients.
///
/// Backing reads may lag writes by `read_staleness_ms`. Read-train-write on
/// one key is serialized by a per-key lock; different keys run in parallel.
/// Versions are assigned by the store, so they never regress even when a
/// stale read fed the update.
pub struct CoefficientStore {
    schema: Schema,
    trainer: TrainerConfig,
    config: StoreConfig,
    clock: SimClock,
    fixed: RwLock<LinearFixedEffect>,
    slots: RwLock<HashMap<ReKey, Arc<Slot>>>,
    cache: Mutex<HashMap<ReKey, (CoefficientState, i64)>>,
    events: Mutex<Vec<UpdateEvent>>,
    dead_letters: Mutex<Vec<DeadLetter>>,
}

impl CoefficientStore {
    pub fn new(schema: Schema, trainer: TrainerConfig, config: StoreConfig, clock: SimClock) -> Result<Self> {
        trainer.validate()?;
        if config.read_staleness_ms < 0 || config.ttl_ms.is_some_and(|t| t <= 0) {
            return Err(Error::InvalidConfig("staleness must be >= 0 and ttl > 0".into()));
        }
        Ok(Self {
            fixed: RwLock::new(LinearFixedEffect {
                coeffs: vec![0.0; schema.fixed_dim],
            }),
            schema,
            trainer,
            config,
            clock,
            slots: RwLock::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
            events: Mutex::new(Vec::new()),
            dead_letters: Mutex::new(Vec::new()),
        })
    }

    /// Store seeded with every state of `model` (a batch write at the current time).
    pub fn from_model(model: &GameModel, trainer: TrainerConfig, config: StoreConfig, clock: SimClock) -> Result<Self> {
        let store = Self::new(model.schema.clone(), trainer, config, clock)?;
        store.install_snapshot(model)?;
        Ok(store)
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn trainer_config(&self) -> &TrainerConfig {
        &self.trainer
    }

    fn slot(&self, key: &ReKey) -> Arc<Slot> {
        if let Some(s) = self.slots.read().get(key) {
            return s.clone();
        }
        self.slots.write().entry(key.clone()).or_default().clone()
    }

    fn prior(&self, key: &ReKey) -> Result<CoefficientState> {
        let d = self.schema.re_dim(&key.re_type)?;
        Ok(CoefficientState::prior(
            d,
            self.trainer.hessian_mode,
            self.trainer.lambda_for(&key.re_type),
        ))
    }

    /// Backing-store read: the newest write at least `read_staleness_ms` old,
    /// or the prior if none is visible yet.
    pub fn read_backing(&self, key: &ReKey) -> Result<CoefficientState> {
        let Some(slot) = self.slots.read().get(key).cloned() else {
            return self.prior(key);
        };
        let horizon = self.clock.now() - self.config.read_staleness_ms;
        let history = slot.history.lock();
        match history.iter().rev().find(|v| v.written_at <= horizon) {
            Some(v) => Ok(v.state.clone()),
            None => self.prior(key),
        }
    }

    /// Read through the TTL cache.
    pub fn read(&self, key: &ReKey) -> Result<CoefficientState> {
        if let Some(ttl) = self.config.ttl_ms {
            let now = self.clock.now();
            let mut cache = self.cache.lock();
            match cache.get(key) {
                Some((state, at)) if now - at < ttl => return Ok(state.clone()),
                Some(_) => {
                    cache.remove(key);
                }
                None => {}
            }
        }
        self.read_backing(key)
    }

    /// Newest committed state regardless of visibility.
    pub fn latest(&self, key: &ReKey) -> Option<CoefficientState> {
        let slot = self.slots.read().get(key).cloned()?;
        let history = slot.history.lock();
        history.last().map(|v| v.state.clone())
    }

    pub fn latest_version(&self, key: &ReKey) -> u64 {
        self.latest(key).map_or(0, |s| s.version)
    }

    pub fn keys(&self) -> Vec<ReKey> {
        let mut keys: Vec<ReKey> = self.slots.read().keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Commits `state` as the next version of `key` and returns that version.
    fn commit(&self, key: &ReKey, slot: &Slot, mut state: CoefficientState) -> u64 {
        let now = self.clock.now();
        let horizon = now - self.config.read_staleness_ms;
        let mut history = slot.history.lock();
        let version = history.last().map_or(0, |v| v.state.version) + 1;
        state.version = version;
        history.push(Versioned {
            written_at: now,
            state: state.clone(),
        });
        // keep the newest visible entry and everything after it
        if let Some(pos) = history.iter().rposition(|v| v.written_at <= horizon) {
            history.drain(..pos);
        }
        drop(history);
        if let Some(_ttl) = self.config.ttl_ms {
            self.cache.lock().insert(key.clone(), (state, now));
        }
        version
    }

    /// Plain write outside of any training transaction.
    pub fn write(&self, key: &ReKey, state: CoefficientState) -> Result<u64> {
        if state.dim() != self.schema.re_dim(&key.re_type)? {
            return Err(Error::DimensionMismatch(format!("state for {key} has wrong dimension")));
        }
        let slot = self.slot(key);
        let _guard = slot.rtw_lock.lock();
        Ok(self.commit(key, &slot, state))
    }

    /// Replaces the whole store with a batch-trained model: fixed effect and
    /// every entity. Keys absent from `model` are dropped and the cache is
    /// invalidated. Versions keep increasing across the overwrite.
    pub fn install_snapshot(&self, model: &GameModel) -> Result<()> {
        if model.schema != self.schema {
            return Err(Error::DimensionMismatch(
                "snapshot schema differs from store schema".into(),
            ));
        }
        let now = self.clock.now();
        let mut slots = self.slots.write();
        let mut fresh: HashMap<ReKey, Arc<Slot>> = HashMap::with_capacity(model.random_effects.len());
        for (key, state) in &model.random_effects {
            let prev = slots
                .get(key)
                .map_or(0, |s| s.history.lock().last().map_or(0, |v| v.state.version));
            let mut state = state.clone();
            state.version = prev.max(state.version);
            let slot = Slot::default();
            slot.history.lock().push(Versioned { written_at: now, state });
            fresh.insert(key.clone(), Arc::new(slot));
        }
        *slots = fresh;
        *self.fixed.write() = model.fixed.clone();
        self.cache.lock().clear();
        Ok(())
    }

    /// Model view of the newest committed states.
    pub fn snapshot(&self) -> GameModel {
        let mut model = GameModel::zeros(self.schema.clone(), self.trainer.hessian_mode);
        model.fixed = self.fixed.read().clone();
        for key in self.keys() {
            if let Some(st) = self.latest(&key) {
                model.random_effects.insert(key, st);
            }
        }
        model
    }

    /// Read-train-write of one mini-batch. Returns the applied version.
    ///
    /// On solver failure nothing is written, the batch goes to the
    /// dead-letter sink and the error is returned.
    pub fn rtw(&self, batch: &MiniBatch, config: &TrainerConfig) -> Result<u64> {
        let key = batch.key();
        let slot = self.slot(&key);
        let _guard = slot.rtw_lock.lock();
        let outcome = (|| {
            let state = self.read(&key)?;
            let offsets = compute_offsets(self, batch)?;
            let res = incremental_update(&state, &offsets, config)?;
            Ok::<_, Error>((state.version, res))
        })();
        match outcome {
            Ok((read_version, res)) => {
                let mut state = res.state;
                state.last_update_ts = batch.ts();
                let version = self.commit(&key, &slot, state);
                self.events.lock().push(UpdateEvent {
                    re_type: key.re_type.clone(),
                    re_id: key.re_id.clone(),
                    version,
                    ts: batch.ts(),
                    batch_seq: batch.batch_seq,
                    read_version,
                    loss_before: res.batch_loss_before,
                    loss_after: res.batch_loss_after,
                });
                Ok(version)
            }
            Err(e) => {
                self.dead_letters.lock().push(DeadLetter {
                    batch: batch.clone(),
                    error: e.to_string(),
                });
                Err(e)
            }
        }
    }

    pub fn events(&self) -> Vec<UpdateEvent> {
        self.events.lock().clone()
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter> {
        self.dead_letters.lock().clone()
    }

    pub fn write_event_log<W: Write>(&self, mut out: W) -> Result<()> {
        for e in self.events.lock().iter() {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| Error::io("event log", e))?;
        }
        Ok(())
    }
}

impl ScoreSource for CoefficientStore {
    fn fixed_score(&self, x: &SparseVector) -> Result<f64> {
        x.check_dim(self.schema.fixed_dim)?;
        self.fixed.read().score(x)
    }

    fn re_score(&self, a: &ReAssignment) -> Result<f64> {
        a.features.check_dim(self.schema.re_dim(&a.re_type)?)?;
        let state = self.read(&a.key())?;
        a.features.dot(&state.mean)
    }
}

impl VarianceSource for CoefficientStore {
    fn max_posterior_variance(&self, key: &ReKey) -> f64 {
        let state = match self.read(key) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        match posterior_covariance(&state) {
            Ok(cov) => cov.variances().into_iter().fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Offset instances for the batch's entity: each offset is the fixed-effect
/// score plus every other random-effect type's contribution at its current
/// mean; the features are the active type's.
pub fn compute_offsets<S: ScoreSource + ?Sized>(source: &S, batch: &MiniBatch) -> Result<Vec<OffsetInstance>> {
    batch
        .instances
        .iter()
        .map(|inst| {
            let mut offset = source.fixed_score(&inst.fixed_features)?;
            let mut active = None;
            for a in &inst.re_assignments {
                if a.re_type == batch.re_type {
                    active = Some(a.features.clone());
                } else {
                    offset += source.re_score(a)?;
                }
            }
            let features = active.ok_or_else(|| {
                Error::InvalidInput(format!("instance at ts {} lacks type {}", inst.ts, batch.re_type))
            })?;
            OffsetInstance::new(offset, features, inst.label)
        })
        .collect()
}

/// Recent mini-batches kept for replay on top of a batch snapshot.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity_ms: i64,
    newest_ts: i64,
    per_key: BTreeMap<ReKey, VecDeque<MiniBatch>>,
}

impl ReplayBuffer {
    pub fn new(capacity_ms: i64) -> Self {
        Self {
            capacity_ms,
            newest_ts: i64::MIN,
            per_key: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, batch: MiniBatch) {
        self.newest_ts = self.newest_ts.max(batch.ts());
        self.per_key.entry(batch.key()).or_default().push_back(batch);
        let cutoff = self.newest_ts.saturating_sub(self.capacity_ms);
        self.per_key.retain(|_, ring| {
            while ring.front().is_some_and(|b| b.ts() < cutoff) {
                ring.pop_front();
            }
            !ring.is_empty()
        });
    }

    pub fn len(&self) -> usize {
        self.per_key.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Buffered batches newer than `ts`, per key in stream order.
    pub fn batches_after(&self, ts: i64) -> BTreeMap<ReKey, Vec<&MiniBatch>> {
        self.per_key
            .iter()
            .map(|(k, ring)| {
                let mut v: Vec<&MiniBatch> = ring.iter().filter(|b| b.ts() > ts).collect();
                v.sort_by_key(|b| (b.ts(), b.batch_seq));
                (k.clone(), v)
            })
            .filter(|(_, v)| !v.is_empty())
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReplayReport {
    pub replayed: BTreeMap<ReKey, usize>,
    pub failures: Vec<(ReKey, u64, String)>,
}

/// Installs a batch-trained snapshot, then replays every buffered batch
/// newer than `snapshot_data_ts` through read-train-write.
pub fn apply_batch_snapshot(
    store: &CoefficientStore,
    snapshot: &GameModel,
    snapshot_data_ts: i64,
    replay: &ReplayBuffer,
    config: &TrainerConfig,
) -> Result<ReplayReport> {
    if snapshot_data_ts > store.clock().now() {
        return Err(Error::InvalidInput(format!(
            "snapshot data cutoff {snapshot_data_ts} is in the future (now {})",
            store.clock().now()
        )));
    }
    store.install_snapshot(snapshot)?;
    let mut report = ReplayReport::default();
    for (key, batches) in replay.batches_after(snapshot_data_ts) {
        for b in batches {
            match store.rtw(b, config) {
                Ok(_) => *report.replayed.entry(key.clone()).or_default() += 1,
                Err(e) => report.failures.push((key.clone(), b.batch_seq, e.to_string())),
            }
        }
    }
    Ok(report)
}

/// Batcher, store and replay buffer wired together: each ingested instance
/// may fire batches, which are buffered and applied immediately.
pub struct StreamEngine {
    pub batcher: MiniBatcher,
    pub store: Arc<CoefficientStore>,
    pub replay: ReplayBuffer,
    pub config: TrainerConfig,
}

impl StreamEngine {
    pub fn new(
        policy: TriggerPolicy,
        store: Arc<CoefficientStore>,
        replay_capacity_ms: i64,
        config: TrainerConfig,
    ) -> Result<Self> {
        let batcher = MiniBatcher::new(policy, store.clock().clone())?;
        let batcher = batcher.with_variance_source(store.clone());
        Ok(Self {
            batcher,
            store,
            replay: ReplayBuffer::new(replay_capacity_ms),
            config,
        })
    }

    fn apply(&mut self, batches: Vec<MiniBatch>) -> Vec<Result<u64>> {
        batches
            .into_iter()
            .map(|b| {
                let r = self.store.rtw(&b, &self.config);
                self.replay.push(b);
                r
            })
            .collect()
    }

    pub fn ingest(&mut self, inst: &Instance) -> Vec<Result<u64>> {
        self.store.clock().advance_to(inst.ts);
        let fired = self.batcher.ingest(inst);
        self.apply(fired)
    }

    pub fn tick(&mut self) -> Vec<Result<u64>> {
        let fired = self.batcher.tick();
        self.apply(fired)
    }

    pub fn flush(&mut self) -> Vec<Result<u64>> {
        let fired = self.batcher.flush();
        self.apply(fired)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HessianMode;

    fn inst(ts: i64, id: &str) -> Instance {
        Instance::new(
            ts,
            u8::from(ts % 2 == 0),
            SparseVector::from_pairs([(0, 1.0)]),
            vec![ReAssignment::new("user", id, SparseVector::from_pairs([(0, 1.0)]))],
        )
        .unwrap()
    }

    fn schema() -> Schema {
        Schema::new(1).with_re_type("user", 1).with_re_type("item", 1)
    }

    #[test]
    fn count_trigger() {
        let mut b = MiniBatcher::new(TriggerPolicy::count(2), SimClock::new(0)).unwrap();
        assert!(b.ingest(&inst(1, "a")).is_empty());
        let fired = b.ingest(&inst(2, "a"));
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].instances.len(), 2);
        assert_eq!(b.pending(), 0);
    }

    #[test]
    fn age_trigger_on_tick() {
        let clock = SimClock::new(0);
        let mut b = MiniBatcher::new(TriggerPolicy::age(1000), clock.clone()).unwrap();
        assert!(b.ingest(&inst(0, "a")).is_empty());
        clock.advance(1001);
        let fired = b.tick();
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].instances.len(), 1);
    }

    #[test]
    fn variance_trigger_fires_for_new_entities() {
        let clock = SimClock::new(0);
        let store = Arc::new(
            CoefficientStore::new(
                schema(),
                TrainerConfig::default(),
                StoreConfig::default(),
                clock.clone(),
            )
            .unwrap(),
        );
        let policy = TriggerPolicy {
            max_count: Some(100),
            variance_threshold: Some(0.5),
            ..Default::default()
        };
        let mut b = MiniBatcher::new(policy, clock).unwrap().with_variance_source(store);
        assert_eq!(b.ingest(&inst(0, "new")).len(), 1);
    }

    #[test]
    fn empty_policy_rejected() {
        assert!(MiniBatcher::new(TriggerPolicy::default(), SimClock::new(0)).is_err());
    }

    #[test]
    fn offsets_exclude_active_type() {
        let mut model = GameModel::zeros(schema(), HessianMode::Full);
        model.fixed.coeffs = vec![0.1];
        let mut u = CoefficientState::prior(1, HessianMode::Full, 1.0);
        u.mean = vec![0.3];
        let mut it = CoefficientState::prior(1, HessianMode::Full, 1.0);
        it.mean = vec![0.4];
        model.random_effects.insert(ReKey::new("user", "u"), u);
        model.random_effects.insert(ReKey::new("item", "i"), it);
        let one = SparseVector::from_pairs([(0, 1.0)]);
        let x = Instance::new(
            5,
            1,
            one.clone(),
            vec![
                ReAssignment::new("user", "u", one.clone()),
                ReAssignment::new("item", "i", one.clone()),
            ],
        )
        .unwrap();
        let batch = MiniBatch::new(&ReKey::new("user", "u"), vec![x], 0).unwrap();
        let off = compute_offsets(&model, &batch).unwrap();
        assert!((off[0].offset - 0.5).abs() < 1e-15);

        let single = MiniBatch::new(&ReKey::new("user", "a"), vec![inst(3, "a")], 1).unwrap();
        assert_eq!(compute_offsets(&model, &single).unwrap()[0].offset, 0.1);
        model.fixed.coeffs = vec![0.0];
        assert_eq!(compute_offsets(&model, &single).unwrap()[0].offset, 0.0);
    }

    #[test]
    fn failed_solve_leaves_version_and_dead_letters() {
        let clock = SimClock::new(0);
        let store = CoefficientStore::new(schema(), TrainerConfig::default(), StoreConfig::default(), clock).unwrap();
        let key = ReKey::new("user", "a");
        let good = MiniBatch::new(&key, vec![inst(0, "a")], 0).unwrap();
        assert_eq!(store.rtw(&good, &TrainerConfig::default()).unwrap(), 1);
        let starved = TrainerConfig {
            solver_max_iter: 1,
            solver_tol: 1e-300,
            ..TrainerConfig::default()
        };
        let next = MiniBatch::new(&key, vec![inst(1, "a"), inst(2, "a")], 1).unwrap();
        assert!(store.rtw(&next, &starved).is_err());
        assert_eq!(store.latest_version(&key), 1);
        assert_eq!(store.dead_letters().len(), 1);
        assert_eq!(store.events().len(), 1);
    }

    #[test]
    fn replay_buffer_evicts_old_batches() {
        let key = ReKey::new("user", "a");
        let mut buf = ReplayBuffer::new(100);
        buf.push(MiniBatch::new(&key, vec![inst(0, "a")], 0).unwrap());
        buf.push(MiniBatch::new(&key, vec![inst(50, "a")], 1).unwrap());
        assert_eq!(buf.len(), 2);
        buf.push(MiniBatch::new(&key, vec![inst(160, "a")], 2).unwrap());
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.batches_after(60)[&key].len(), 1);
    }

    #[test]
    fn event_log_is_json_lines() {
        let store = CoefficientStore::new(
            schema(),
            TrainerConfig::default(),
            StoreConfig::default(),
            SimClock::new(0),
        )
        .unwrap();
        let key = ReKey::new("user", "a");
        store
            .rtw(
                &MiniBatch::new(&key, vec![inst(4, "a")], 7).unwrap(),
                &TrainerConfig::default(),
            )
            .unwrap();
        let mut out = Vec::new();
        store.write_event_log(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let ev: UpdateEvent = serde_json::from_str(text.trim()).unwrap();
        assert_eq!((ev.version, ev.ts, ev.batch_seq), (1, 4, 7));
    }
}
