//! Command-line front end: architecture search, sub-network training,
//! evaluation, architecture export, synthetic-data generation, and the
//! gradient-verification suite, driven by a declarative JSON config.
//!
//! Every run is self-describing: the config is materialized (defaults
//! filled in, presets expanded, channel count resolved from the data)
//! before anything else happens, hashed with SHA-256, and the hash is
//! embedded in every artifact together with the seed and the crate
//! version. JSON artifacts are written with a fixed 17-significant-digit
//! float format, so re-running the same config and seed reproduces them
//! byte for byte; `timings.json` is the one deliberately wall-clock file.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numeric
//! failure, 3 checkpoint hash or shape mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_synthetic, load_csv, make_windows, short_term_split, CsvSchema, Frequency, RawSeries,
    SplitFractions, SyntheticConfig, SyntheticManifest, WindowedDataset,
};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::hypernet::HyperNetwork;
use crate::metrics::MetricsReport;
use crate::nnops::{forecast_window_on_tape, ForecastModel, ModelConfig};
use crate::search::{
    ab_darts_search, darts_search, forecast_dataset, train_subnet, PhaseTimings, SearchConfig,
    SearchTrace,
};
use crate::searchspace::{parse_spec_file, ArchitectureSpec, SearchSpaceConfig};

/// Version string embedded in every artifact.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable prepended to relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "TSNAS_OUTPUT_ROOT";

// ── Canonical JSON ──────────────────────────────────────────────────

/// serde_json formatter that writes every float with 17 significant
/// digits (`{:.16e}`), enough to reproduce any finite f64 exactly, so
/// equal values always serialize to equal bytes.
struct CanonicalFormatter;

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        value: f64,
    ) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        value: f32,
    ) -> std::io::Result<()> {
        write!(writer, "{:.16e}", f64::from(value))
    }
}

/// Serialize to compact JSON with the fixed float format.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CanonicalFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json produces UTF-8"))
}

/// Lowercase-hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_json_artifact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_canonical_json(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ── Run configuration ───────────────────────────────────────────────

/// Where the series comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TaskConfig {
    /// Timestamp-first CSV on disk.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequency: Option<Frequency>,
    },
    /// Series generated on the fly from a synthetic spec.
    Synthetic { synthetic: SyntheticConfig },
}

/// Evaluation protocol: long-horizon (z-scored data, scale-dependent
/// metrics) or short-horizon (original units, includes SMAPE/MASE/OWA).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    #[default]
    LongTerm,
    ShortTerm,
}

/// Which search procedure `search` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    /// Ablation-based: score candidates by masking, keep the argmax.
    #[default]
    AbDarts,
    /// Bi-level baseline: alternate weight and architecture steps, then
    /// take the per-node argmax of the architectural parameters.
    Darts,
}

impl Algo {
    fn name(self) -> &'static str {
        match self {
            Algo::AbDarts => "ab_darts",
            Algo::Darts => "darts",
        }
    }
}

/// Either a named preset ("full", "s1".."s4") or an explicit space.
/// Materialization always resolves to the explicit form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceConfig {
    Preset(String),
    Explicit(SearchSpaceConfig),
}

/// Expand a preset name into its search space.
pub fn space_preset(name: &str) -> Result<SearchSpaceConfig> {
    match name.to_ascii_lowercase().as_str() {
        "full" => Ok(SearchSpaceConfig::full()),
        "s1" => Ok(SearchSpaceConfig::s1()),
        "s2" => Ok(SearchSpaceConfig::s2()),
        "s3" => Ok(SearchSpaceConfig::s3()),
        "s4" => Ok(SearchSpaceConfig::s4()),
        other => Err(Error::config(format!(
            "unknown search-space preset {other:?}; expected full, s1, s2, s3, or s4"
        ))),
    }
}

fn default_space() -> SpaceConfig {
    SpaceConfig::Preset("full".to_string())
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One run, fully described. Fields left out of the file take defaults;
/// `materialize` fills them in so the written config is complete.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub mode: ForecastMode,
    #[serde(default)]
    pub algo: Algo,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default = "default_space")]
    pub space: SpaceConfig,
    /// Chronological train/val/test fractions (long-horizon protocol).
    /// Defaults to 0.6/0.2/0.2 for CSV tasks and 0.7/0.1/0.2 for
    /// synthetic ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<SplitFractions>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// The resolved search space (only callable after `materialize`).
    pub fn space(&self) -> Result<&SearchSpaceConfig> {
        match &self.space {
            SpaceConfig::Explicit(s) => Ok(s),
            SpaceConfig::Preset(name) => Err(Error::state(format!(
                "space preset {name:?} has not been materialized"
            ))),
        }
    }

    /// Fill defaults, expand the space preset, resolve the channel count
    /// from the loaded series, and validate everything. The result is the
    /// exact configuration the run uses, and what gets hashed.
    pub fn materialize(&mut self, series: &RawSeries) -> Result<()> {
        if let SpaceConfig::Preset(name) = &self.space {
            self.space = SpaceConfig::Explicit(space_preset(name)?);
        }
        let SpaceConfig::Explicit(space) = &self.space else {
            unreachable!("preset was just expanded");
        };
        space.validate()?;

        if let TaskConfig::Csv { path, name, frequency } = &mut self.task {
            if name.is_none() {
                *name = Some(
                    path.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "series".to_string()),
                );
            }
            if frequency.is_none() {
                *frequency = Some(Frequency::Unknown);
            }
        }

        self.model.num_channels = series.num_channels();
        self.model.validate()?;
        self.search.validate()?;

        match self.mode {
            ForecastMode::LongTerm => {
                if self.fractions.is_none() {
                    self.fractions = Some(match self.task {
                        TaskConfig::Csv { .. } => SplitFractions::ett(),
                        TaskConfig::Synthetic { .. } => SplitFractions {
                            train: 0.7,
                            val: 0.1,
                            test: 0.2,
                        },
                    });
                }
                self.fractions.as_ref().expect("just filled").validate()?;
            }
            ForecastMode::ShortTerm => {
                if self.model.lookback != 2 * self.model.horizon {
                    return Err(Error::config(format!(
                        "short_term mode requires lookback = 2 x horizon, got lookback {} \
                         for horizon {}",
                        self.model.lookback, self.model.horizon
                    )));
                }
                if self.fractions.is_some() {
                    return Err(Error::config(
                        "short_term mode derives its own splits; remove `fractions`",
                    ));
                }
            }
        }

        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        Ok(())
    }

    /// Hash of the canonical JSON of the materialized config.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(to_canonical_json(self)?.as_bytes()))
    }
}

/// Read the series named by the task.
pub fn load_task(task: &TaskConfig) -> Result<RawSeries> {
    match task {
        TaskConfig::Csv { path, name, frequency } => {
            let schema = CsvSchema {
                series_name: name.clone().unwrap_or_else(|| {
                    path.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "series".to_string())
                }),
                frequency: frequency.unwrap_or(Frequency::Unknown),
            };
            load_csv(path, &schema)
        }
        TaskConfig::Synthetic { synthetic } => gen_synthetic(synthetic).map(|(s, _)| s),
    }
}

/// Window sets for one run, regardless of protocol. Short-horizon runs
/// additionally carry the raw history each scaled metric needs.
pub struct TaskData {
    pub train: WindowedDataset,
    pub val: Option<WindowedDataset>,
    pub test: Option<WindowedDataset>,
    /// Short-horizon only: per-channel in-sample values in original units.
    pub insample: Option<Vec<Vec<f64>>>,
    pub periodicity: Option<usize>,
}

/// Build the window sets the materialized config describes.
pub fn build_datasets(cfg: &RunConfig, series: &RawSeries) -> Result<TaskData> {
    match cfg.mode {
        ForecastMode::LongTerm => {
            let fr = cfg
                .fractions
                .ok_or_else(|| Error::state("config has not been materialized"))?;
            let splits = make_windows(series, cfg.model.lookback, cfg.model.horizon, fr)?;
            Ok(TaskData {
                train: splits.train,
                val: splits.val,
                test: splits.test,
                insample: None,
                periodicity: None,
            })
        }
        ForecastMode::ShortTerm => {
            let st = short_term_split(series, cfg.model.horizon)?;
            Ok(TaskData {
                train: st.train,
                val: Some(st.val),
                test: Some(st.test),
                insample: Some(st.insample),
                periodicity: Some(st.periodicity),
            })
        }
    }
}

impl TaskData {
    fn val_required(&self) -> Result<&WindowedDataset> {
        self.val
            .as_ref()
            .ok_or_else(|| Error::config("this command needs a validation split (val fraction is 0)"))
    }
}

/// Metrics over one split: plain long-horizon report, or the per-channel
/// mean of full short-horizon reports when an in-sample history exists.
pub fn evaluate_model(
    model: &ForecastModel,
    ds: &WindowedDataset,
    data: &TaskData,
) -> Result<MetricsReport> {
    match (&data.insample, data.periodicity) {
        (Some(insample), Some(s)) => {
            let choices = model.choices();
            let mut reports = Vec::with_capacity(ds.windows.len());
            for w in &ds.windows {
                let mut tape = Tape::new();
                let out = forecast_window_on_tape(
                    &mut tape,
                    &model.params,
                    &model.ids,
                    &model.cfg,
                    &choices,
                    &w.lookback,
                    &mut None,
                )?;
                reports.push(MetricsReport::short_term(
                    &w.target,
                    tape.data(out),
                    &insample[w.channel],
                    s,
                )?);
            }
            MetricsReport::mean_of(&reports)
        }
        _ => {
            let (y, yhat) = forecast_dataset(model, ds)?;
            MetricsReport::long_term(&y, &yhat)
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 6] = b"TSNAS\0";
const CKPT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model, stored as canonical JSON
/// behind a hashed binary header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointPayload {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub model: ModelConfig,
    pub architecture: ArchitectureSpec,
    pub params: crate::diffcore::ParamSet,
}

/// Write `magic | version | sha256(payload) | len | payload`.
pub fn write_checkpoint(path: &Path, payload: &CheckpointPayload) -> Result<()> {
    let json = to_canonical_json(payload)?;
    let digest = Sha256::digest(json.as_bytes());
    let mut out = Vec::with_capacity(6 + 4 + 32 + 8 + json.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Read a checkpoint, verifying the payload hash. A malformed file is a
/// parse error; a payload whose hash disagrees with the header is a
/// checkpoint mismatch.
pub fn read_checkpoint(path: &Path) -> Result<CheckpointPayload> {
    let parse_err = |msg: &str| Error::Parse {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 6 + 4 + 32 + 8 {
        return Err(parse_err("file too short to be a checkpoint"));
    }
    if &bytes[..6] != CKPT_MAGIC {
        return Err(parse_err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(parse_err(&format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let stored_hash = &bytes[10..42];
    let len = u64::from_le_bytes(bytes[42..50].try_into().expect("8 bytes")) as usize;
    let payload = bytes
        .get(50..50 + len)
        .ok_or_else(|| parse_err("checkpoint payload is truncated"))?;
    if bytes.len() != 50 + len {
        return Err(parse_err("trailing bytes after checkpoint payload"));
    }
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored_hash {
        return Err(Error::CheckpointMismatch(format!(
            "payload hash does not match header in {}",
            path.display()
        )));
    }
    serde_json::from_slice(payload).map_err(|e| parse_err(&format!("payload JSON: {e}")))
}

/// Rebuild the stored model: construct the architecture fresh, check the
/// stored parameters match it shape for shape, then install them.
pub fn model_from_payload(payload: &CheckpointPayload) -> Result<ForecastModel> {
    let mut model = ForecastModel::new(payload.model.clone(), payload.architecture.clone(), 0)?;
    if model.params.len() != payload.params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint stores {} parameters but the architecture has {}",
            payload.params.len(),
            model.params.len()
        )));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let expected = model.params.get(id);
        let stored = payload.params.get(id);
        if expected.shape != stored.shape || expected.name != stored.name {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint parameter {:?} {:?} does not match the architecture's {:?} {:?}",
                stored.name, stored.shape, expected.name, expected.shape
            )));
        }
    }
    model.params = payload.params.clone();
    Ok(model)
}

// ── Artifact schemas ────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub best_val_mse: f64,
    pub steps: usize,
    pub epochs_completed: usize,
    pub stopped_early: bool,
}

/// Deterministic half of the search summary (`summary.json`).
#[derive(Debug, Serialize, Deserialize)]
pub struct SearchSummary {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub algo: String,
    pub architecture: ArchitectureSpec,
    pub search_model_steps: usize,
    pub scoring_events: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_supernet_val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery_regressions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_steps: Option<usize>,
    pub subnet_params: usize,
    pub retrain: RetrainSummary,
    pub val: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
}

/// Wall-clock half of the search summary (`timings.json`); the one JSON
/// artifact that legitimately differs between re-runs.
#[derive(Debug, Serialize, Deserialize)]
pub struct TimingsArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub supernet_train_secs: f64,
    pub scoring_secs: f64,
    pub recovery_secs: f64,
    pub retrain_secs: f64,
    pub search_total_secs: f64,
    pub total_secs: f64,
}

impl TimingsArtifact {
    fn new(config_hash: &str, seed: u64, t: &PhaseTimings) -> Self {
        TimingsArtifact {
            config_hash: config_hash.to_string(),
            seed,
            code_version: CODE_VERSION.to_string(),
            supernet_train_secs: t.supernet_train_secs,
            scoring_secs: t.scoring_secs,
            recovery_secs: t.recovery_secs,
            retrain_secs: t.retrain_secs,
            search_total_secs: t.search_total_secs(),
            total_secs: t.search_total_secs() + t.retrain_secs,
        }
    }
}

/// Per-seed training metrics (`metrics.json`).
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainMetricsArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub architecture: ArchitectureSpec,
    pub best_val_mse: f64,
    pub steps: usize,
    pub epochs_completed: usize,
    pub stopped_early: bool,
    pub val: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
}

/// Mean across seeds (`metrics_mean.json`).
#[derive(Debug, Serialize, Deserialize)]
pub struct AggregateMetricsArtifact {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub val: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
}

/// `eval_report.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_hash: String,
    pub checkpoint_config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub split: String,
    pub report: MetricsReport,
}

// ── Command-line definition ─────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "tsnas",
    version,
    about = "Architecture search for time-series forecasting Transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Search for an architecture, then retrain and evaluate it.
    Search(SearchArgs),
    /// Train a fixed architecture on the configured task.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of the configured task.
    Eval(EvalArgs),
    /// Print or save the architecture stored in a checkpoint.
    ExportArch(ExportArchArgs),
    /// Generate a synthetic series as CSV plus manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Verify reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_algo(s: &str) -> std::result::Result<Algo, String> {
    match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "abdarts" => Ok(Algo::AbDarts),
        "darts" => Ok(Algo::Darts),
        other => Err(format!("unknown algorithm {other:?}; expected abdarts or darts")),
    }
}

fn parse_space_arg(s: &str) -> std::result::Result<SearchSpaceConfig, String> {
    space_preset(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured algorithm (abdarts or darts).
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algo>,
    /// Override the configured search space with a preset (full, s1..s4).
    #[arg(long, value_parser = parse_space_arg)]
    space: Option<SearchSpaceConfig>,
    /// Run this many seeds, numbered 0..N, instead of the configured list.
    #[arg(long)]
    seeds: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Architecture file to train; the all-residual baseline
    /// (dot-product attention, ReLU, 4x width) when omitted.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Run this many seeds, numbered 0..N, instead of the configured list.
    #[arg(long)]
    seeds: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run configuration describing the dataset (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate on: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArchArgs {
    /// Checkpoint to read.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Destination file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenSyntheticArgs {
    /// Synthetic-series spec (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for data.csv and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random instances per operation group.
    #[arg(long, default_value_t = 25)]
    instances: usize,
    /// Random instances of the full mixed-network loss.
    #[arg(long, default_value_t = 25)]
    hypernet_instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

// ── Entry point ─────────────────────────────────────────────────────

/// Exit code for an error: 1 config/usage, 2 numeric, 3 checkpoint.
pub fn exit_code_of(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::UndefinedMetric(_) => 2,
        Error::CheckpointMismatch(_) => 3,
        _ => 1,
    }
}

/// Entry point for the command-line binary. Returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_of(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Search(args) => cmd_search(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::ExportArch(args) => cmd_export_arch(args),
        Cmd::GenSynthetic(args) => cmd_gen_synthetic(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

/// Prefix relative output directories with `TSNAS_OUTPUT_ROOT` when set.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn expand_seed_count(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn prepared_run(
    config_path: &Path,
    seeds: Option<u64>,
    output_dir: Option<PathBuf>,
) -> Result<(RunConfig, RawSeries, String, TaskData, PathBuf)> {
    let mut cfg = RunConfig::from_file(config_path)?;
    if let Some(n) = seeds {
        if n == 0 {
            return Err(Error::config("--seeds must be at least 1"));
        }
        cfg.seeds = expand_seed_count(n);
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let series = load_task(&cfg.task)?;
    cfg.materialize(&series)?;
    let hash = cfg.config_hash()?;
    let data = build_datasets(&cfg, &series)?;
    let out_dir = resolve_output_dir(&cfg.output_dir);
    fs::create_dir_all(&out_dir)?;
    write_json_artifact(&out_dir.join("config.json"), &cfg)?;
    Ok((cfg, series, hash, data, out_dir))
}

fn search_config_for_seed(cfg: &RunConfig, seed: u64) -> SearchConfig {
    let mut s = cfg.search.clone();
    s.seed = seed;
    s
}

// ── search ──────────────────────────────────────────────────────────

fn cmd_search(args: SearchArgs) -> Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(algo) = args.algo {
        cfg.algo = algo;
    }
    if let Some(space) = args.space {
        cfg.space = SpaceConfig::Explicit(space);
    }
    if let Some(n) = args.seeds {
        if n == 0 {
            return Err(Error::config("--seeds must be at least 1"));
        }
        cfg.seeds = expand_seed_count(n);
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    let series = load_task(&cfg.task)?;
    cfg.materialize(&series)?;
    let hash = cfg.config_hash()?;
    let data = build_datasets(&cfg, &series)?;
    let out_dir = resolve_output_dir(&cfg.output_dir);
    fs::create_dir_all(&out_dir)?;
    write_json_artifact(&out_dir.join("config.json"), &cfg)?;

    println!("config {hash}");
    for &seed in &cfg.seeds {
        let seed_dir = out_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        run_search_seed(&cfg, &data, &hash, seed, &seed_dir)?;
    }
    Ok(())
}

fn run_search_seed(
    cfg: &RunConfig,
    data: &TaskData,
    hash: &str,
    seed: u64,
    seed_dir: &Path,
) -> Result<()> {
    let val = data.val_required()?;
    let scfg = search_config_for_seed(cfg, seed);
    let mut hn = HyperNetwork::new(cfg.model.clone(), cfg.space()?.clone(), seed)?;

    let mut trace = SearchTrace::default();
    let searched = match cfg.algo {
        Algo::AbDarts => {
            let result = ab_darts_search(&mut hn, &data.train, val, &scfg, &mut trace);
            // Persist whatever decisions were reached even when the search
            // aborts, then surface the error.
            write_trace(&seed_dir.join("trace.jsonl"), &trace)?;
            let outcome = result?;
            Searched {
                spec: outcome.spec,
                timings: outcome.timings,
                model_steps: outcome.model_steps,
                final_supernet_val_loss: Some(outcome.final_val_loss),
                recovery_regressions: Some(outcome.recovery_regressions),
                alpha_steps: None,
            }
        }
        Algo::Darts => {
            let t0 = Instant::now();
            let outcome = darts_search(&mut hn, &data.train, val, &scfg)?;
            write_trace(&seed_dir.join("trace.jsonl"), &trace)?;
            Searched {
                spec: outcome.spec,
                timings: PhaseTimings {
                    supernet_train_secs: t0.elapsed().as_secs_f64(),
                    ..PhaseTimings::default()
                },
                model_steps: outcome.model_steps,
                final_supernet_val_loss: None,
                recovery_regressions: None,
                alpha_steps: Some(outcome.alpha_steps),
            }
        }
    };
    let Searched {
        spec,
        mut timings,
        model_steps,
        final_supernet_val_loss,
        recovery_regressions,
        alpha_steps,
    } = searched;

    write_json_artifact(&seed_dir.join("architecture.json"), &spec)?;

    let t_retrain = Instant::now();
    let trained = train_subnet(&cfg.model, &spec, &data.train, val, &scfg)?;
    timings.retrain_secs = t_retrain.elapsed().as_secs_f64();

    let test_report = data
        .test
        .as_ref()
        .map(|ds| evaluate_model(&trained.model, ds, data))
        .transpose()?;

    write_checkpoint(
        &seed_dir.join("checkpoint.bin"),
        &CheckpointPayload {
            config_hash: hash.to_string(),
            seed,
            code_version: CODE_VERSION.to_string(),
            model: cfg.model.clone(),
            architecture: spec.clone(),
            params: trained.model.params.clone(),
        },
    )?;

    let summary = SearchSummary {
        config_hash: hash.to_string(),
        seed,
        code_version: CODE_VERSION.to_string(),
        algo: cfg.algo.name().to_string(),
        architecture: spec,
        search_model_steps: model_steps,
        scoring_events: trace.records.iter().map(|r| r.scores.len()).sum(),
        final_supernet_val_loss,
        recovery_regressions,
        alpha_steps,
        subnet_params: trained.model.num_params(),
        retrain: RetrainSummary {
            best_val_mse: trained.best_val_mse,
            steps: trained.steps,
            epochs_completed: trained.epochs_completed,
            stopped_early: trained.stopped_early,
        },
        val: trained.report,
        test: test_report,
    };
    write_json_artifact(&seed_dir.join("summary.json"), &summary)?;
    write_json_artifact(
        &seed_dir.join("timings.json"),
        &TimingsArtifact::new(hash, seed, &timings),
    )?;

    println!(
        "seed {seed}: best val mse {:.6}{}, wrote {}",
        summary.retrain.best_val_mse,
        summary
            .test
            .as_ref()
            .map(|t| format!(", test mse {:.6}", t.mse))
            .unwrap_or_default(),
        seed_dir.display()
    );
    Ok(())
}

struct Searched {
    spec: ArchitectureSpec,
    timings: PhaseTimings,
    model_steps: usize,
    final_supernet_val_loss: Option<f64>,
    recovery_regressions: Option<usize>,
    alpha_steps: Option<usize>,
}

fn write_trace(path: &Path, trace: &SearchTrace) -> Result<()> {
    let mut text = String::new();
    for record in &trace.records {
        text.push_str(&to_canonical_json(record)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (cfg, _series, hash, data, out_dir) =
        prepared_run(&args.config, args.seeds, args.output_dir)?;
    let spec = match &args.arch {
        Some(path) => parse_spec_file(path)?,
        None => ArchitectureSpec::vanilla(cfg.model.num_blocks),
    };
    let val = data.val_required()?;

    println!("config {hash}");
    let mut val_reports = Vec::new();
    let mut test_reports = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let scfg = search_config_for_seed(&cfg, seed);
        let trained = train_subnet(&cfg.model, &spec, &data.train, val, &scfg)?;
        let test_report = data
            .test
            .as_ref()
            .map(|ds| evaluate_model(&trained.model, ds, &data))
            .transpose()?;

        write_checkpoint(
            &seed_dir.join("checkpoint.bin"),
            &CheckpointPayload {
                config_hash: hash.clone(),
                seed,
                code_version: CODE_VERSION.to_string(),
                model: cfg.model.clone(),
                architecture: spec.clone(),
                params: trained.model.params.clone(),
            },
        )?;
        let artifact = TrainMetricsArtifact {
            config_hash: hash.clone(),
            seed,
            code_version: CODE_VERSION.to_string(),
            architecture: spec.clone(),
            best_val_mse: trained.best_val_mse,
            steps: trained.steps,
            epochs_completed: trained.epochs_completed,
            stopped_early: trained.stopped_early,
            val: trained.report,
            test: test_report,
        };
        write_json_artifact(&seed_dir.join("metrics.json"), &artifact)?;
        println!(
            "seed {seed}: best val mse {:.6}{}",
            artifact.best_val_mse,
            artifact
                .test
                .as_ref()
                .map(|t| format!(", test mse {:.6}", t.mse))
                .unwrap_or_default()
        );
        val_reports.push(artifact.val);
        test_reports.extend(artifact.test);
    }

    let aggregate = AggregateMetricsArtifact {
        config_hash: hash.clone(),
        seeds: cfg.seeds.clone(),
        code_version: CODE_VERSION.to_string(),
        val: MetricsReport::mean_of(&val_reports)?,
        test: if test_reports.len() == cfg.seeds.len() {
            Some(MetricsReport::mean_of(&test_reports)?)
        } else {
            None
        },
    };
    write_json_artifact(&out_dir.join("metrics_mean.json"), &aggregate)?;
    if let Some(t) = &aggregate.test {
        println!("mean over {} seeds: test mse {:.6}", cfg.seeds.len(), t.mse);
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let payload = read_checkpoint(&args.checkpoint)?;

    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    let series = load_task(&cfg.task)?;
    cfg.materialize(&series)?;
    let hash = cfg.config_hash()?;

    if payload.model.num_channels != series.num_channels() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint expects {} channels but the dataset has {}",
            payload.model.num_channels,
            series.num_channels()
        )));
    }
    if payload.model.lookback != cfg.model.lookback || payload.model.horizon != cfg.model.horizon {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint window geometry {}->{} does not match the config's {}->{}",
            payload.model.lookback, payload.model.horizon, cfg.model.lookback, cfg.model.horizon
        )));
    }
    if payload.config_hash != hash {
        log::warn!(
            "checkpoint was trained under config {} but evaluating under {}",
            payload.config_hash,
            hash
        );
    }

    let data = build_datasets(&cfg, &series)?;
    let ds = match args.split.as_str() {
        "train" => Some(&data.train),
        "val" => data.val.as_ref(),
        "test" => data.test.as_ref(),
        other => {
            return Err(Error::config(format!(
                "unknown split {other:?}; expected train, val, or test"
            )))
        }
    }
    .ok_or_else(|| Error::config(format!("the {} split is empty under this config", args.split)))?;

    let model = model_from_payload(&payload)?;
    let report = evaluate_model(&model, ds, &data)?;
    let artifact = EvalArtifact {
        config_hash: hash,
        checkpoint_config_hash: payload.config_hash,
        seed: payload.seed,
        code_version: CODE_VERSION.to_string(),
        split: args.split,
        report,
    };

    let out_dir = resolve_output_dir(&cfg.output_dir);
    fs::create_dir_all(&out_dir)?;
    write_json_artifact(&out_dir.join("eval_report.json"), &artifact)?;
    println!("{}", to_canonical_json(&artifact)?);
    Ok(())
}

// ── export-arch ─────────────────────────────────────────────────────

fn cmd_export_arch(args: ExportArchArgs) -> Result<()> {
    let payload = read_checkpoint(&args.checkpoint)?;
    let json = to_canonical_json(&payload.architecture)?;
    match args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, format!("{json}\n"))?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

// ── gen-synthetic ───────────────────────────────────────────────────

/// `manifest.json`: the synthetic manifest plus the artifact triple. The
/// extra keys do not disturb parsing the file back as a plain manifest.
#[derive(Debug, Serialize)]
struct ManifestArtifact<'a> {
    config_hash: &'a str,
    seed: u64,
    code_version: &'a str,
    #[serde(flatten)]
    manifest: &'a SyntheticManifest,
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::Parse {
        path: args.config.display().to_string(),
        msg: e.to_string(),
    })?;
    let config: SyntheticConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.config.display().to_string(),
        msg: e.to_string(),
    })?;
    let (series, manifest) = gen_synthetic(&config)?;
    let hash = sha256_hex(to_canonical_json(&config)?.as_bytes());

    let out_dir = resolve_output_dir(&args.out_dir);
    fs::create_dir_all(&out_dir)?;

    let csv_path = out_dir.join("data.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::Parse {
        path: csv_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.channel_names.iter().cloned());
    let write_err = |e: csv::Error| Error::Parse {
        path: csv_path.display().to_string(),
        msg: e.to_string(),
    };
    writer.write_record(&header).map_err(write_err)?;
    for t in 0..series.len() {
        let mut row = vec![t.to_string()];
        row.extend(series.channels.iter().map(|ch| format!("{:.16e}", ch[t])));
        writer.write_record(&row).map_err(write_err)?;
    }
    writer.flush()?;

    write_json_artifact(
        &out_dir.join("manifest.json"),
        &ManifestArtifact {
            config_hash: &hash,
            seed: config.seed,
            code_version: CODE_VERSION,
            manifest: &manifest,
        },
    )?;
    println!(
        "wrote {} ({} points x {} channels) and manifest.json",
        csv_path.display(),
        series.len(),
        series.num_channels()
    );
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let t0 = Instant::now();
    let suite =
        crate::gradsuite::run_full_suite(args.instances, args.hypernet_instances, args.seed)?;
    for group in &suite.groups {
        println!(
            "{:<28} instances {:>3}  coords {:>7}  worst |ad-fd| {:.3e}  {}",
            group.name,
            group.instances,
            group.checked_coords,
            group.worst_abs_diff,
            if group.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "checked {} coordinates in {:.1}s",
        suite.total_coords(),
        t0.elapsed().as_secs_f64()
    );
    if suite.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = suite
            .groups
            .iter()
            .filter(|g| !g.passed())
            .map(|g| g.name.as_str())
            .collect();
        Err(Error::numeric(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}
