use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lambda_core::batch::train_batch;
use lambda_core::datasets::{
    prepare_movielens, read_instances_jsonl, read_ratings_csv, synth_drift_stream, synth_ratings,
    write_instances_jsonl, write_ratings_csv, Manifest, MovieLensOptions, SynthConfig,
};
use lambda_core::evaluation::{
    decay_experiment, delta_sweep, run_eval_from, split_ts, theorem_gap_check, train_initial, write_theorem_rows,
    DecayConfig, EvalConfig, TheoremProblem, Variant,
};
use lambda_core::sampler::derive_seed;
use lambda_core::{GameModel, Instance, Schema, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::args::{
    DataArgs, DecayArgs, EvalArgs, MovieLensArgs, Prepare, RatingsArgs, SweepArgs, SynthArgs, TheoremArgs, TrainArgs,
    WarmArgs,
};
use crate::Failure;

/// What `train` writes: the model plus the settings it was trained with.
#[derive(Debug, Serialize, Deserialize)]
pub struct Snapshot {
    /// Exclusive upper bound on the training timestamps.
    pub until_ts: i64,
    pub rounds: usize,
    pub trainer: TrainerConfig,
    pub model: GameModel,
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("cannot create {}: {e}", path.display())))
}

fn finish<W: Write>(mut w: W, path: &Path) -> Result<(), Failure> {
    w.flush()
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Data(e.to_string()))?;
    w.write_all(b"\n")
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
    finish(w, path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let file = File::open(path).map_err(|e| Failure::Data(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Runs `body` against the file at `out`, or stdout.
fn with_output(
    out: Option<&Path>,
    body: impl FnOnce(&mut dyn Write) -> lambda_core::Result<()>,
) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            body(&mut w)?;
            finish(w, path)
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            finish(lock, Path::new("<stdout>"))
        }
    }
}

fn manifest_path(out: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}

fn write_dataset(
    instances: &[Instance],
    manifest: &Manifest,
    out: &Path,
    explicit: Option<&PathBuf>,
) -> Result<(), Failure> {
    let mut w = create(out)?;
    write_instances_jsonl(instances, &mut w)?;
    finish(w, out)?;
    write_json(manifest, &manifest_path(out, explicit))?;
    eprintln!(
        "wrote {} instances ({} positives, {} entities) to {}",
        manifest.instances,
        manifest.positives,
        manifest.entities,
        out.display()
    );
    Ok(())
}

pub fn prepare(cmd: Prepare) -> Result<(), Failure> {
    match cmd {
        Prepare::Movielens(a) => prepare_movielens_cmd(a),
        Prepare::Synth(a) => prepare_synth(a),
        Prepare::Ratings(a) => prepare_ratings(a),
    }
}

fn prepare_movielens_cmd(a: MovieLensArgs) -> Result<(), Failure> {
    if a.rank == 0 {
        return Err(Failure::Usage("--rank must be at least 1".into()));
    }
    let ratings = read_ratings_csv(&a.ratings)?;
    let opts = MovieLensOptions {
        rank: a.rank,
        als_reg: a.als_reg,
        als_iters: a.als_iters,
        seed: a.seed,
        target_span_ms: a.span,
        max_users: a.max_users,
        max_items: a.max_items,
    };
    let (instances, schema) = prepare_movielens(&ratings, &opts)?;
    let manifest = Manifest::describe(&a.ratings.display().to_string(), &instances, &schema, a.seed);
    write_dataset(&instances, &manifest, &a.out, a.manifest.as_ref())
}

fn prepare_synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        n_entities: a.entities,
        n_per_entity: a.per_entity,
        drift_at: a.drift_at,
        drift_magnitude: a.drift_magnitude,
        drift_ramp: a.drift_ramp,
        seed: a.seed,
        dim: a.dim,
        one_hot: a.one_hot,
        span_ms: a.span,
        entity_scale: a.entity_scale,
        arrival_spread: a.arrival_spread,
        ..Default::default()
    };
    let stream = synth_drift_stream(&cfg)?;
    let manifest = Manifest::describe("synthetic drift stream", &stream.instances, &stream.schema, a.seed);
    write_dataset(&stream.instances, &manifest, &a.out, a.manifest.as_ref())?;
    if let Some(path) = &a.truth {
        let mut w = create(path)?;
        for rec in &stream.truth {
            serde_json::to_writer(&mut w, rec).map_err(|e| Failure::Data(e.to_string()))?;
            w.write_all(b"\n")
                .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
        }
        finish(w, path)?;
    }
    Ok(())
}

fn prepare_ratings(a: RatingsArgs) -> Result<(), Failure> {
    if a.users == 0 || a.items == 0 {
        return Err(Failure::Usage("--users and --items must be positive".into()));
    }
    let ratings = synth_ratings(a.users, a.items, a.ratings, a.seed);
    let mut w = create(&a.out)?;
    write_ratings_csv(&ratings, &mut w)?;
    finish(w, &a.out)
}

struct Dataset {
    instances: Vec<Instance>,
    schema: Schema,
}

fn load(args: &DataArgs) -> Result<Dataset, Failure> {
    let manifest: Manifest = read_json(&manifest_path(&args.data, args.manifest.as_ref()))?;
    let instances = read_instances_jsonl(&args.data)?;
    for inst in &instances {
        manifest.schema.validate(inst)?;
    }
    Ok(Dataset {
        instances,
        schema: manifest.schema,
    })
}

fn trainer(args: &DataArgs) -> TrainerConfig {
    let mut t = TrainerConfig::default();
    if let Some(l) = args.lambda {
        t.lambda = l;
    }
    if let Some(h) = args.hessian {
        t.hessian_mode = h.into();
    }
    t
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let data = load(&a.data)?;
    let trainer = trainer(&a.data);
    trainer.validate()?;
    if a.data.rounds == 0 {
        return Err(Failure::Usage("--rounds must be at least 1".into()));
    }
    let window = &data.instances[..data.instances.partition_point(|i| i.ts < a.until_ts)];
    if window.is_empty() {
        return Err(lambda_core::Error::EmptyTrainingWindow.into());
    }
    let model = train_batch(window, &data.schema, &trainer, a.data.rounds)?;
    eprintln!(
        "trained on {} instances, {} random-effect entities",
        window.len(),
        model.random_effects.len()
    );
    write_json(
        &Snapshot {
            until_ts: a.until_ts,
            rounds: a.data.rounds,
            trainer,
            model,
        },
        &a.out,
    )
}

/// Cold model and evaluation settings, from a snapshot or trained here.
fn cold_start(
    data: &Dataset,
    args: &DataArgs,
    warm: &WarmArgs,
    delta: f64,
) -> Result<(GameModel, EvalConfig), Failure> {
    match &warm.model {
        Some(path) => {
            let snap: Snapshot = read_json(path)?;
            if snap.model.schema != data.schema {
                return Err(Failure::Data(format!(
                    "{} was trained on a different schema",
                    path.display()
                )));
            }
            if args.lambda.is_some_and(|l| l != snap.trainer.lambda) {
                return Err(Failure::Usage("--lambda differs from the snapshot's".into()));
            }
            if args
                .hessian
                .is_some_and(|h| lambda_core::HessianMode::from(h) != snap.trainer.hessian_mode)
            {
                return Err(Failure::Usage("--hessian differs from the snapshot's".into()));
            }
            let mut cfg = EvalConfig::new(Variant::Nu, 1, snap.until_ts);
            cfg.trainer = snap.trainer;
            cfg.trainer.delta = delta;
            cfg.rounds = snap.rounds;
            Ok((snap.model, cfg))
        }
        None => {
            let warm_start = match warm.warm_start_ts {
                Some(ts) => ts,
                None => split_ts(&data.instances, warm.warm_fraction)?,
            };
            let mut cfg = EvalConfig::new(Variant::Nu, 1, warm_start);
            cfg.trainer = trainer(args);
            cfg.trainer.delta = delta;
            cfg.rounds = args.rounds;
            cfg.validate()?;
            let model = train_initial(&data.instances, &data.schema, &cfg)?;
            Ok((model, cfg))
        }
    }
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let variant: Variant = a.variant.into();
    if a.tau.is_some() && variant != Variant::Rwbu {
        return Err(Failure::Usage(format!(
            "--tau only applies to --variant rwbu, not {variant}"
        )));
    }
    let data = load(&a.data)?;
    let (model, mut cfg) = cold_start(&data, &a.data, &a.warm, a.delta)?;
    cfg.variant = variant;
    cfg.delta_ms = a.increment;
    cfg.tau_ms = a.tau.unwrap_or(0);
    cfg.max_increments = a.max_increments;
    cfg.sample_seed = a.thompson.then(|| derive_seed(a.data.seed, &["thompson"]));
    let result = run_eval_from(&data.instances, &model, &cfg)?;
    eprintln!(
        "{variant}: aggregate AUC {:.4} over {} increments ({} without both labels, {} failed updates)",
        result.aggregate_auc,
        result.increments.len(),
        result.degenerate.len(),
        result.failed_updates
    );
    with_output(a.out.as_deref(), |w| result.write_csv(w))
}

pub fn decay(a: DecayArgs) -> Result<(), Failure> {
    let data = load(&a.data)?;
    let (first, last) = match (data.instances.first(), data.instances.last()) {
        (Some(f), Some(l)) => (f.ts, l.ts),
        _ => return Err(lambda_core::Error::EmptyTrainingWindow.into()),
    };
    let horizon_ms = a.increment.saturating_mul(a.horizon as i64);
    let start_min = a.start_min.unwrap_or(first + (last - first) / 2);
    let start_max = a.start_max.unwrap_or(last + 1 - horizon_ms);
    let mut base = EvalConfig::new(Variant::Nu, a.increment, start_min);
    base.trainer = trainer(&a.data);
    base.trainer.delta = a.delta;
    base.rounds = a.data.rounds;
    let result = decay_experiment(
        &data.instances,
        &data.schema,
        &DecayConfig {
            base,
            horizon_increments: a.horizon,
            n_runs: a.runs,
            start_min_ts: start_min,
            start_max_ts: start_max,
            seed: a.data.seed,
        },
    )?;
    with_output(a.out.as_deref(), |w| result.write_csv(w))
}

pub fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let data = load(&a.data)?;
    let warm_start = match (&a.warm.model, a.warm.warm_start_ts) {
        (Some(_), _) => {
            return Err(Failure::Usage(
                "sweep trains its own cold model; use --warm-start-ts".into(),
            ))
        }
        (None, Some(ts)) => ts,
        (None, None) => split_ts(&data.instances, a.warm.warm_fraction)?,
    };
    let mut base = EvalConfig::new(Variant::Ll, 1, warm_start);
    base.trainer = trainer(&a.data);
    base.rounds = a.data.rounds;
    let result = delta_sweep(&data.instances, &data.schema, &base, &a.deltas, &a.increments)?;
    with_output(a.out.as_deref(), |w| result.write_csv(w))
}

pub fn theorems(a: TheoremArgs) -> Result<(), Failure> {
    if a.deltas.is_empty() {
        return Err(Failure::Usage("--deltas must not be empty".into()));
    }
    let mut rows = Vec::new();
    let mut failed = 0;
    for trial in 0..a.trials {
        let problem = TheoremProblem::random(derive_seed(a.seed, &["theorems", &trial.to_string()]));
        let config = TrainerConfig {
            delta: a.deltas[trial % a.deltas.len()],
            lambda: a.lambda,
            hessian_mode: a.hessian.into(),
            ..Default::default()
        };
        let report = theorem_gap_check(&problem, &config, a.c)?;
        failed += usize::from(!report.all_pass());
        rows.extend(report.rows);
    }
    eprintln!(
        "{} of {} trials satisfy the bound at every step",
        a.trials - failed,
        a.trials
    );
    with_output(a.out.as_deref(), |w| write_theorem_rows(rows.iter(), w))
}
