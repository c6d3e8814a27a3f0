use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lambda_core::evaluation::Variant;
use lambda_core::HessianMode;

#[derive(Debug, Parser)]
#[command(
    name = "lambda",
    version,
    about = "Incremental mixed-effect models: data preparation, training and offline evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an instance file (JSON lines) plus a manifest.
    #[command(subcommand)]
    Prepare(Prepare),
    /// Train a model on every instance before `--until-ts`.
    Train(TrainArgs),
    /// Score the warm part increment by increment with one update variant.
    Eval(EvalArgs),
    /// NU and LL AUC after random start times, averaged per increment.
    Decay(DecayArgs),
    /// LL aggregate AUC over a grid of forgetting factors and increment lengths.
    Sweep(SweepArgs),
    /// Check the incremental-improvement inequalities on random problems.
    Theorems(TheoremArgs),
}

#[derive(Debug, Subcommand)]
pub enum Prepare {
    /// From a `userId,movieId,rating,timestamp` ratings file.
    Movielens(MovieLensArgs),
    /// A seeded drifting stream with known ground truth.
    Synth(SynthArgs),
    /// A ratings file shaped like the public one, for machines without it.
    Ratings(RatingsArgs),
}

#[derive(Debug, Args)]
pub struct MovieLensArgs {
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.1)]
    pub als_reg: f64,
    #[arg(long, default_value_t = 15)]
    pub als_iters: usize,
    /// Keep only the most active users.
    #[arg(long)]
    pub max_users: Option<usize>,
    /// Keep only the most rated items.
    #[arg(long)]
    pub max_items: Option<usize>,
    /// Length the whole ratings period is compressed to.
    #[arg(long, default_value = "14d", value_parser = parse_duration)]
    pub span: i64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub entities: usize,
    #[arg(long, default_value_t = 200)]
    pub per_entity: usize,
    /// Fraction of the span where drift begins.
    #[arg(long, default_value_t = 0.5)]
    pub drift_at: f64,
    #[arg(long, default_value_t = 2.0)]
    pub drift_magnitude: f64,
    /// Fraction of the span over which the drift phases in.
    #[arg(long, default_value_t = 0.0)]
    pub drift_ramp: f64,
    /// Random-effect dimension, bias included.
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long)]
    pub one_hot: bool,
    #[arg(long, default_value = "200h", value_parser = parse_duration)]
    pub span: i64,
    #[arg(long, default_value_t = 1.0)]
    pub entity_scale: f64,
    /// Entities first appear uniformly in this leading fraction of the span.
    #[arg(long, default_value_t = 0.0)]
    pub arrival_spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write the per-entity ground truth as JSON.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RatingsArgs {
    #[arg(long, default_value_t = 943)]
    pub users: usize,
    #[arg(long, default_value_t = 1682)]
    pub items: usize,
    #[arg(long, default_value_t = 100_000)]
    pub ratings: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HessianArg {
    Full,
    Diag,
}

impl From<HessianArg> for HessianMode {
    fn from(h: HessianArg) -> Self {
        match h {
            HessianArg::Full => HessianMode::Full,
            HessianArg::Diag => HessianMode::Diagonal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Nu,
    Ibu,
    Rwbu,
    Ll,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Nu => Variant::Nu,
            VariantArg::Ibu => Variant::Ibu,
            VariantArg::Rwbu => Variant::Rwbu,
            VariantArg::Ll => Variant::Ll,
        }
    }
}

/// Data and trainer flags shared by the training and evaluation commands.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Instance file; its manifest is read from `<data>.manifest.json`
    /// unless `--manifest` is given.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Prior precision.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Backfitting rounds for batch training.
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[arg(long, value_enum)]
    pub hessian: Option<HessianArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Exclusive upper bound on training timestamps (ms).
    #[arg(long, allow_hyphen_values = true)]
    pub until_ts: i64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where the warm part starts: a trained snapshot, a timestamp or a fraction.
#[derive(Debug, Args)]
pub struct WarmArgs {
    /// Snapshot from `train`; its cutoff is the warm start.
    #[arg(long, conflicts_with_all = ["warm_start_ts", "warm_fraction"])]
    pub model: Option<PathBuf>,
    #[arg(long, conflicts_with = "warm_fraction", allow_hyphen_values = true)]
    pub warm_start_ts: Option<i64>,
    /// Split point as a fraction of the data's time span.
    #[arg(long, default_value_t = 0.5)]
    pub warm_fraction: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub warm: WarmArgs,
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    /// Increment length, e.g. `30m`, `1h`.
    #[arg(long = "Delta", default_value = "1h", value_parser = parse_duration)]
    pub increment: i64,
    /// Retraining delay; rwbu only.
    #[arg(long, value_parser = parse_duration)]
    pub tau: Option<i64>,
    /// Forgetting factor.
    #[arg(long, default_value_t = 0.95)]
    pub delta: f64,
    #[arg(long)]
    pub max_increments: Option<usize>,
    /// Score with one Thompson draw per entity (seeded by `--seed`) instead of means.
    #[arg(long)]
    pub thompson: bool,
    /// Series CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecayArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 18)]
    pub horizon: usize,
    #[arg(long = "Delta", default_value = "1h", value_parser = parse_duration)]
    pub increment: i64,
    #[arg(long, default_value_t = 0.95)]
    pub delta: f64,
    /// Earliest start; defaults to the middle of the data.
    #[arg(long, allow_hyphen_values = true)]
    pub start_min: Option<i64>,
    /// Latest start; defaults to the last one leaving a full horizon.
    #[arg(long, allow_hyphen_values = true)]
    pub start_max: Option<i64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub warm: WarmArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9,0.95,1.0")]
    pub deltas: Vec<f64>,
    #[arg(long = "Deltas", value_delimiter = ',', default_value = "15m,1h,4h", value_parser = parse_duration)]
    pub increments: Vec<i64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoremArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Forgetting factors, cycled over trials.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9,1.0")]
    pub deltas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Constant on the cubic drift remainder.
    #[arg(long, default_value_t = lambda_core::evaluation::THEOREM_C)]
    pub c: f64,
    #[arg(long, value_enum, default_value = "full")]
    pub hessian: HessianArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Milliseconds from `500ms`, `30s`, `30m`, `1h`, `2d`, or a bare integer
/// (already milliseconds).
pub fn parse_duration(s: &str) -> Result<i64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit() && c != '.').unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let unit_ms = match unit {
        "" | "ms" => 1.0,
        "s" => 1e3,
        "m" => 60e3,
        "h" => 3600e3,
        "d" => 86_400e3,
        _ => return Err(format!("unknown duration unit in {s:?}; use ms, s, m, h or d")),
    };
    let value: f64 = num.parse().map_err(|_| format!("bad duration {s:?}"))?;
    let ms = value * unit_ms;
    if !ms.is_finite() || ms < 0.0 || ms > i64::MAX as f64 / 2.0 {
        return Err(format!("duration {s:?} is out of range"));
    }
    if ms.fract() != 0.0 {
        return Err(format!("duration {s:?} is not a whole number of milliseconds"));
    }
    Ok(ms as i64)
}
