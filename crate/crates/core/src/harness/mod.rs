//! Experiment orchestration: JSON configs in, CSV/JSON reports out.
//!
//! A config names one experiment kind, a grid, and a seeding policy. `run`
//! expands the grid × seeds into trials, derives one RNG stream per trial
//! with `mix_seed(base_seed, trial_index)`, executes trials under a bounded
//! worker pool, and merges results in grid order so the output is identical
//! at any parallelism level. Model fixtures (train or load, plus optional
//! outlier injection) are built once, before the trials run.

mod cli;
mod report;

pub use cli::{cli, EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
pub use report::{aggregate_report, read_rows, write_csv_atomic, write_json_atomic};

use crate::metrics::MetricsError;
use crate::perturb::{PerturbError, PerturbKind};
use crate::quant::{
    scale_sweep, QuantError, QuantScheme, ScalePolicy, Transform,
};
use crate::tensor::{
    l2, mix_seed, sample, stats, sub, DistSpec, RngStream, Tensor, TensorError,
};
use crate::toymodel::{
    evaluate, inject_outliers, load_checkpoint, save_checkpoint, train, InjectionPlan,
    ModelConfig, ModelError, ModelParams, OptimizerConfig, Preset, TaskSpec,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

// ─── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Io(String),
    Tensor(TensorError),
    Quant(QuantError),
    Perturb(PerturbError),
    Model(ModelError),
    Metrics(MetricsError),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(msg) => write!(f, "config error: {msg}"),
            HarnessError::Io(msg) => write!(f, "i/o error: {msg}"),
            HarnessError::Tensor(e) => write!(f, "{e}"),
            HarnessError::Quant(e) => write!(f, "{e}"),
            HarnessError::Perturb(e) => write!(f, "{e}"),
            HarnessError::Model(e) => write!(f, "{e}"),
            HarnessError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Tensor(e)
    }
}
impl From<QuantError> for HarnessError {
    fn from(e: QuantError) -> Self {
        HarnessError::Quant(e)
    }
}
impl From<PerturbError> for HarnessError {
    fn from(e: PerturbError) -> Self {
        HarnessError::Perturb(e)
    }
}
impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Model(e)
    }
}
impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        HarnessError::Metrics(e)
    }
}
impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;

/// True when the failure is numerical (NaN loss, degenerate draws) rather
/// than bad input; drives the CLI exit code.
pub fn is_numeric_failure(e: &HarnessError) -> bool {
    matches!(
        e,
        HarnessError::Model(ModelError::DivergedLoss { .. })
            | HarnessError::Perturb(PerturbError::DegenerateDraw)
            | HarnessError::Model(ModelError::Perturb(PerturbError::DegenerateDraw))
            | HarnessError::Tensor(TensorError::NonFinite { .. })
    )
}

// ─── Config ──────────────────────────────────────────────────────────────────

pub const SCHEMA_VERSION: u32 = 1;

/// Where an input tensor comes from: a QTNS file, or a seeded draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Path { path: PathBuf },
    Draw { dist: DistSpec, shape: Vec<usize> },
}

impl InputSource {
    /// Materializes the tensor; drawn inputs use the trial stream.
    fn load(&self, rng: &mut RngStream) -> HarnessResult<Tensor> {
        match self {
            InputSource::Path { path } => Ok(crate::tensor::read_tensor(path)?),
            InputSource::Draw { dist, shape } => Ok(sample(dist, shape.clone(), rng)?),
        }
    }
}

/// A scale factor, absolute ("0.5") or relative to absmax ("2x").
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSpec {
    Absolute(f32),
    RelativeToAbsmax(f32),
}

impl AlphaSpec {
    pub fn parse(s: &str) -> Result<AlphaSpec, String> {
        let s = s.trim();
        if let Some(stripped) = s.strip_suffix('x') {
            stripped
                .parse::<f32>()
                .map(AlphaSpec::RelativeToAbsmax)
                .map_err(|e| format!("bad relative alpha '{s}': {e}"))
        } else {
            s.parse::<f32>()
                .map(AlphaSpec::Absolute)
                .map_err(|e| format!("bad alpha '{s}': {e}"))
        }
    }

    /// Resolves against the absmax of the (transform-space) tensor.
    pub fn resolve(&self, absmax: f32) -> f32 {
        match *self {
            AlphaSpec::Absolute(a) => a,
            AlphaSpec::RelativeToAbsmax(r) => r * absmax,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            AlphaSpec::Absolute(a) => format!("{a}"),
            AlphaSpec::RelativeToAbsmax(r) => format!("{r}x"),
        }
    }
}

impl Serialize for AlphaSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for AlphaSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        AlphaSpec::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// How to obtain the model for model-based experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    /// Load this checkpoint directory...
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// ...or train a fresh model.
    #[serde(default)]
    pub train: Option<TrainFixture>,
    /// Optional post-training outlier injection.
    #[serde(default)]
    pub outliers: Option<OutlierSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFixture {
    #[serde(default = "ModelConfig::default")]
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub train_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub channel_fraction: f64,
    pub scale: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_eval_batches")]
    pub n_batches: usize,
    #[serde(default = "default_eval_batch_size")]
    pub batch_size: usize,
    pub eval_seed: u64,
}

fn default_eval_batches() -> usize {
    8
}
fn default_eval_batch_size() -> usize {
    32
}

/// A quantization setting for comparisons: a bit-width preset plus uniform
/// or non-uniform rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSetting {
    pub preset: Preset,
    #[serde(default = "identity_transform")]
    pub transform: Transform,
}

fn identity_transform() -> Transform {
    Transform::Identity
}

impl QuantSetting {
    pub fn label(&self) -> String {
        let style = match self.transform {
            Transform::Identity => "uniform",
            Transform::SignedPower { .. } => "nonuniform",
        };
        format!("{}-{}", self.preset.label(), style)
    }
}

/// The experiment payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentKind {
    /// Quantize drawn or loaded tensors under a grid of schemes.
    KernelSweep { input: InputSource, schemes: Vec<QuantScheme> },
    /// Trace noise norm and clip fraction over a grid of scale factors.
    ScaleSweep {
        input: InputSource,
        bits: u8,
        #[serde(default = "identity_transform")]
        transform: Transform,
        alphas: Vec<AlphaSpec>,
    },
    /// Figure-2 style: artificial perturbations on a trained model.
    PerturbCompare {
        fixture: FixtureSpec,
        task: TaskSpec,
        preset: Preset,
        kinds: Vec<PerturbKind>,
        eval: EvalSpec,
    },
    /// Table-1 style: quantization settings on a trained model.
    QuantCompare {
        fixture: FixtureSpec,
        task: TaskSpec,
        settings: Vec<QuantSetting>,
        eval: EvalSpec,
    },
    /// Train a toy model and write a checkpoint per seed.
    ToyTrain {
        #[serde(default = "ModelConfig::default")]
        model: ModelConfig,
        task: TaskSpec,
        steps: usize,
        #[serde(default)]
        optimizer: OptimizerConfig,
        checkpoint_out: PathBuf,
        #[serde(default)]
        eval: Option<EvalSpec>,
    },
    /// Evaluate a checkpoint under an optional quantization setting.
    ToyEval {
        fixture: FixtureSpec,
        task: TaskSpec,
        #[serde(default)]
        setting: Option<QuantSetting>,
        eval: EvalSpec,
    },
}

/// Top-level experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment_id: String,
    #[serde(flatten)]
    pub kind: ExperimentKind,
    pub base_seed: u64,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    pub output_dir: PathBuf,
    /// Worker pool size; 0 means one worker per core.
    #[serde(default)]
    pub parallelism: usize,
}

fn default_seeds() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> HarnessResult<ExperimentConfig> {
        let value: serde_json::Value =
            serde_json::from_str(json).map_err(|e| HarnessError::Config(e.to_string()))?;
        let config: ExperimentConfig = serde_json::from_value(value.clone())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        // `flatten` on the experiment payload defeats serde's own
        // deny_unknown_fields at the top level, so reject typos by comparing
        // the input keys against the accepted config echoed back to JSON.
        let echo = serde_json::to_value(&config)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let (Some(input), Some(known)) = (value.as_object(), echo.as_object()) {
            for key in input.keys() {
                if !known.contains_key(key) {
                    return Err(HarnessError::Config(format!("unknown config key '{key}'")));
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> HarnessResult<ExperimentConfig> {
        let raw = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            HarnessError::Io(format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> HarnessResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_seeds == 0 {
            return Err(HarnessError::Config("n_seeds must be at least 1".into()));
        }
        let empty = match &self.kind {
            ExperimentKind::KernelSweep { schemes, .. } => schemes.is_empty(),
            ExperimentKind::ScaleSweep { alphas, .. } => alphas.is_empty(),
            ExperimentKind::PerturbCompare { kinds, .. } => kinds.is_empty(),
            ExperimentKind::QuantCompare { settings, .. } => settings.is_empty(),
            ExperimentKind::ToyTrain { steps, .. } => *steps == 0,
            ExperimentKind::ToyEval { .. } => false,
        };
        if empty {
            return Err(HarnessError::Config("experiment grid is empty".into()));
        }
        if let ExperimentKind::PerturbCompare { fixture, .. }
        | ExperimentKind::QuantCompare { fixture, .. }
        | ExperimentKind::ToyEval { fixture, .. } = &self.kind
        {
            if fixture.checkpoint.is_none() && fixture.train.is_none() {
                return Err(HarnessError::Config(
                    "fixture needs either a checkpoint or a train spec".into(),
                ));
            }
        }
        Ok(())
    }
}

// ─── Results ─────────────────────────────────────────────────────────────────

/// One CSV line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub experiment_id: String,
    pub preset: String,
    pub site_scope: String,
    pub kind: String,
    pub bits_w: String,
    pub bits_a: String,
    pub transform: String,
    pub seed: u64,
    pub metric: String,
    pub baseline: f64,
    pub value: f64,
    pub delta: f64,
}

impl TrialRow {
    /// Lays a metric comparison out on the CSV schema; the degradation row's
    /// setting label is carried redundantly by (preset, kind, bits,
    /// transform).
    fn from_degradation(
        experiment_id: &str,
        preset: &str,
        kind: &str,
        bits_w: &str,
        bits_a: &str,
        transform: &str,
        row: &crate::metrics::DegradationRow,
    ) -> TrialRow {
        TrialRow {
            experiment_id: experiment_id.to_string(),
            preset: preset.to_string(),
            site_scope: "all".to_string(),
            kind: kind.to_string(),
            bits_w: bits_w.to_string(),
            bits_a: bits_a.to_string(),
            transform: transform.to_string(),
            seed: row.seed,
            metric: row.metric.clone(),
            baseline: row.baseline,
            value: row.value,
            delta: row.delta,
        }
    }
}

/// The three standard degradation rows of one model evaluation.
fn degradation_rows(
    setting: &str,
    seed: u64,
    baseline: &crate::toymodel::EvalMetrics,
    value: &crate::toymodel::EvalMetrics,
) -> Vec<crate::metrics::DegradationRow> {
    use crate::metrics::DegradationRow;
    vec![
        DegradationRow::new(setting, "accuracy", baseline.accuracy, value.accuracy, seed),
        DegradationRow::new(setting, "ce_loss", baseline.ce_loss, value.ce_loss, seed),
        DegradationRow::new(setting, "perplexity", baseline.perplexity, value.perplexity, seed),
    ]
}

/// All rows produced by one grid-point × seed trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial_index: usize,
    pub grid_label: String,
    pub seed: u64,
    pub rows: Vec<TrialRow>,
    pub wall_time_s: f64,
}

/// The output of one `run`: ordered trials plus where they were written.
#[derive(Debug)]
pub struct RunOutput {
    pub trials: Vec<TrialResult>,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
}

fn transform_label(tf: &Transform) -> String {
    match tf {
        Transform::Identity => "identity".to_string(),
        Transform::SignedPower { exponent } => format!("signed_power({exponent:.4})"),
    }
}

// ─── Fixture ─────────────────────────────────────────────────────────────────

struct Fixture {
    params: ModelParams,
}

fn build_fixture(spec: &FixtureSpec) -> HarnessResult<Fixture> {
    let mut params = if let Some(dir) = &spec.checkpoint {
        load_checkpoint(dir)?.0
    } else if let Some(tf) = &spec.train {
        let mut params =
            crate::toymodel::init(&tf.model, &mut RngStream::new(tf.model.init_seed))?;
        let mut rng = RngStream::new(tf.train_seed);
        train(&mut params, &tf.task, tf.steps, &tf.optimizer, &mut rng)?;
        params
    } else {
        return Err(HarnessError::Config("fixture has no model source".into()));
    };
    if let Some(outliers) = &spec.outliers {
        inject_outliers(&mut params, outliers.channel_fraction, outliers.scale, outliers.seed);
    }
    Ok(Fixture { params })
}

// ─── Run ─────────────────────────────────────────────────────────────────────

struct TrialJob {
    trial_index: usize,
    grid_index: usize,
    grid_label: String,
    seed_index: u64,
}

/// Executes `config`, writing `trials.csv` and `run_manifest.json` into the
/// output directory. Returns the trials in deterministic grid order.
pub fn run(config: &ExperimentConfig) -> HarnessResult<RunOutput> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;

    // Model-based experiments share one immutable fixture across trials.
    let fixture = match &config.kind {
        ExperimentKind::PerturbCompare { fixture, .. }
        | ExperimentKind::QuantCompare { fixture, .. }
        | ExperimentKind::ToyEval { fixture, .. } => Some(build_fixture(fixture)?),
        _ => None,
    };

    let grid_labels: Vec<String> = match &config.kind {
        ExperimentKind::KernelSweep { schemes, .. } => schemes
            .iter()
            .map(|s| {
                format!(
                    "b{}-{}-{}",
                    s.bits,
                    match s.scale_policy {
                        ScalePolicy::AbsmaxSymmetric => "absmax".to_string(),
                        ScalePolicy::MinMaxAsymmetric => "minmax".to_string(),
                        ScalePolicy::Fixed { alpha } => format!("fixed{alpha}"),
                    },
                    transform_label(&s.transform)
                )
            })
            .collect(),
        ExperimentKind::ScaleSweep { alphas, .. } => {
            alphas.iter().map(|a| a.label()).collect()
        }
        ExperimentKind::PerturbCompare { kinds, .. } => {
            kinds.iter().map(|k| k.label().to_string()).collect()
        }
        ExperimentKind::QuantCompare { settings, .. } => {
            settings.iter().map(|s| s.label()).collect()
        }
        ExperimentKind::ToyTrain { .. } => vec!["train".to_string()],
        ExperimentKind::ToyEval { setting, .. } => {
            vec![setting.map_or("full_precision".to_string(), |s| s.label())]
        }
    };

    let mut jobs = Vec::new();
    for (grid_index, grid_label) in grid_labels.iter().enumerate() {
        for seed_index in 0..config.n_seeds as u64 {
            jobs.push(TrialJob {
                trial_index: jobs.len(),
                grid_index,
                grid_label: grid_label.clone(),
                seed_index,
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let results: Vec<HarnessResult<TrialResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_trial(config, fixture.as_ref(), job))
            .collect()
    });

    let mut trials = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(trial) => trials.push(trial),
            Err(e) => failures.push(format!(
                "trial {} ({} seed {}): {e}",
                job.trial_index, job.grid_label, job.seed_index
            )),
        }
    }
    if trials.is_empty() && !failures.is_empty() {
        return Err(HarnessError::Config(failures.join("; ")));
    }

    let csv_path = config.output_dir.join("trials.csv");
    let rows: Vec<&TrialRow> = trials.iter().flat_map(|t| t.rows.iter()).collect();
    report::write_csv_atomic(&csv_path, &rows)?;

    let manifest_path = config.output_dir.join("run_manifest.json");
    let manifest = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "experiment_id": config.experiment_id,
        "rng_algorithm": RngStream::ALGORITHM,
        "config": config,
        "n_trials": trials.len(),
        "failures": failures,
        "wall_time_s": trials.iter().map(|t| t.wall_time_s).sum::<f64>(),
        "written_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    });
    report::write_json_atomic(&manifest_path, &manifest)?;

    Ok(RunOutput { trials, csv_path, manifest_path })
}

fn run_trial(
    config: &ExperimentConfig,
    fixture: Option<&Fixture>,
    job: &TrialJob,
) -> HarnessResult<TrialResult> {
    let start = std::time::Instant::now();
    let trial_seed = mix_seed(config.base_seed, job.trial_index as u64);
    let mut rows = Vec::new();
    let row = |kind: &str,
               preset: &str,
               bits_w: &str,
               bits_a: &str,
               transform: &str,
               metric: &str,
               baseline: f64,
               value: f64| TrialRow {
        experiment_id: config.experiment_id.clone(),
        preset: preset.to_string(),
        site_scope: "all".to_string(),
        kind: kind.to_string(),
        bits_w: bits_w.to_string(),
        bits_a: bits_a.to_string(),
        transform: transform.to_string(),
        seed: job.seed_index,
        metric: metric.to_string(),
        baseline,
        value,
        delta: value - baseline,
    };

    match &config.kind {
        ExperimentKind::KernelSweep { input, schemes } => {
            let mut rng = RngStream::new(trial_seed);
            let tensor = input.load(&mut rng)?;
            let scheme = &schemes[job.grid_index];
            let (q, info) = crate::quant::quantize_with_info(&tensor, scheme)?;
            let delta = sub(&tensor, &crate::quant::dequantize(&q)?)?;
            let tf = transform_label(&scheme.transform);
            let bits = scheme.bits.to_string();
            let mean_abs =
                delta.data().iter().map(|d| d.abs() as f64).sum::<f64>() / delta.len() as f64;
            rows.push(row("quantize", &job.grid_label, &bits, "", &tf, "l2_delta", 0.0, l2(&delta)));
            rows.push(row(
                "quantize", &job.grid_label, &bits, "", &tf, "clip_fraction", 0.0,
                info.clip_fraction(),
            ));
            rows.push(row("quantize", &job.grid_label, &bits, "", &tf, "mean_abs_delta", 0.0, mean_abs));
            // Magnitude-bucketed error: how |Δ| distributes over |x| deciles.
            if tensor.len() >= 20 {
                let buckets = crate::metrics::bucketed_error(&tensor, &delta, 10)?;
                let low = buckets.buckets.first().unwrap().mean_abs_delta;
                let high = buckets.buckets.last().unwrap().mean_abs_delta;
                rows.push(row("quantize", &job.grid_label, &bits, "", &tf, "bucket_low_mean_abs_delta", 0.0, low));
                rows.push(row("quantize", &job.grid_label, &bits, "", &tf, "bucket_high_mean_abs_delta", 0.0, high));
            }
        }
        ExperimentKind::ScaleSweep { input, bits, transform, alphas } => {
            let mut rng = RngStream::new(trial_seed);
            let tensor = input.load(&mut rng)?;
            let scheme = QuantScheme {
                bits: *bits,
                scale_policy: ScalePolicy::AbsmaxSymmetric,
                granularity: crate::quant::Granularity::PerTensor,
                transform: *transform,
            };
            // Relative alphas resolve against absmax in transform space.
            let reference = match transform {
                Transform::Identity => stats(&tensor)?.absmax,
                tf => tensor
                    .data()
                    .iter()
                    .map(|&x| tf.forward(x as f64).abs() as f32)
                    .fold(0.0f32, f32::max),
            };
            let alpha = alphas[job.grid_index].resolve(reference);
            let sweep = scale_sweep(&tensor, &scheme, &[alpha])?;
            let tf = transform_label(transform);
            let bits_s = bits.to_string();
            rows.push(row("scale_sweep", &job.grid_label, &bits_s, "", &tf, "alpha", 0.0, sweep[0].alpha as f64));
            rows.push(row("scale_sweep", &job.grid_label, &bits_s, "", &tf, "l2_delta", 0.0, sweep[0].l2_delta));
            rows.push(row("scale_sweep", &job.grid_label, &bits_s, "", &tf, "clip_fraction", 0.0, sweep[0].clip_fraction));
        }
        ExperimentKind::PerturbCompare { task, preset, kinds, eval, .. } => {
            let params = &fixture.expect("model fixture").params;
            let kind = kinds[job.grid_index];
            let baseline =
                evaluate(params, task, &InjectionPlan::empty(), eval.n_batches, eval.batch_size, eval.eval_seed)?;
            let plan = match kind {
                PerturbKind::Clip { k, .. } => InjectionPlan::clip_preset(params, k),
                _ => InjectionPlan::perturb_preset(params, *preset, kind, trial_seed),
            };
            let m = evaluate(params, task, &plan, eval.n_batches, eval.batch_size, eval.eval_seed)?;
            let bw = preset.weight_bits().to_string();
            let ba = preset.activation_bits().map_or(String::from("16"), |b| b.to_string());
            for d in degradation_rows(&job.grid_label, job.seed_index, &baseline, &m) {
                rows.push(TrialRow::from_degradation(
                    &config.experiment_id, preset.label(), kind.label(), &bw, &ba, "", &d,
                ));
            }
        }
        ExperimentKind::QuantCompare { task, settings, eval, .. } => {
            let params = &fixture.expect("model fixture").params;
            let setting = settings[job.grid_index];
            // Seeds vary the evaluation data; baselines are per-seed.
            let eval_seed = mix_seed(eval.eval_seed, job.seed_index);
            let baseline =
                evaluate(params, task, &InjectionPlan::empty(), eval.n_batches, eval.batch_size, eval_seed)?;
            let plan = InjectionPlan::quantize_preset(params, setting.preset, setting.transform);
            let m = evaluate(params, task, &plan, eval.n_batches, eval.batch_size, eval_seed)?;
            let bw = setting.preset.weight_bits().to_string();
            let ba = setting.preset.activation_bits().map_or(String::from("16"), |b| b.to_string());
            let tf = transform_label(&setting.transform);
            for d in degradation_rows(&job.grid_label, job.seed_index, &baseline, &m) {
                rows.push(TrialRow::from_degradation(
                    &config.experiment_id, setting.preset.label(), "quantize", &bw, &ba, &tf, &d,
                ));
            }
        }
        ExperimentKind::ToyTrain { model, task, steps, optimizer, checkpoint_out, eval } => {
            let mut params = crate::toymodel::init(
                &model.normalized(),
                &mut RngStream::new(mix_seed(model.init_seed, job.seed_index)),
            )?;
            let mut rng = RngStream::new(trial_seed);
            let record = train(&mut params, task, *steps, optimizer, &mut rng)?;
            let dir = if config.n_seeds == 1 {
                checkpoint_out.clone()
            } else {
                checkpoint_out.with_file_name(format!(
                    "{}-s{}",
                    checkpoint_out.file_name().unwrap_or_default().to_string_lossy(),
                    job.seed_index
                ))
            };
            let mut meta = BTreeMap::new();
            meta.insert("task".to_string(), serde_json::json!(task));
            meta.insert("steps".to_string(), serde_json::json!(steps));
            meta.insert("optimizer".to_string(), serde_json::json!(optimizer));
            meta.insert("train_seed".to_string(), serde_json::json!(trial_seed));
            meta.insert(
                "final_loss".to_string(),
                serde_json::json!(record.loss_curve.last().copied().unwrap_or(f64::NAN)),
            );
            save_checkpoint(&dir, &params, meta)?;
            report::write_loss_curve(&dir.join("loss_curve.csv"), &record.loss_curve)?;
            let final_loss = record.loss_curve.last().copied().unwrap_or(f64::NAN);
            rows.push(row("train", task.label().as_str(), "", "", "", "final_loss", 0.0, final_loss));
            if let Some(eval) = eval {
                let m = evaluate(&params, task, &InjectionPlan::empty(), eval.n_batches, eval.batch_size, eval.eval_seed)?;
                rows.push(row("train", task.label().as_str(), "", "", "", "accuracy", 0.0, m.accuracy));
                rows.push(row("train", task.label().as_str(), "", "", "", "perplexity", 0.0, m.perplexity));
            }
        }
        ExperimentKind::ToyEval { task, setting, eval, .. } => {
            let params = &fixture.expect("model fixture").params;
            let eval_seed = mix_seed(eval.eval_seed, job.seed_index);
            let baseline =
                evaluate(params, task, &InjectionPlan::empty(), eval.n_batches, eval.batch_size, eval_seed)?;
            let (m, preset_label, bw, ba, tf) = match setting {
                Some(s) => {
                    let plan = InjectionPlan::quantize_preset(params, s.preset, s.transform);
                    (
                        evaluate(params, task, &plan, eval.n_batches, eval.batch_size, eval_seed)?,
                        s.preset.label().to_string(),
                        s.preset.weight_bits().to_string(),
                        s.preset.activation_bits().map_or(String::from("16"), |b| b.to_string()),
                        transform_label(&s.transform),
                    )
                }
                None => (baseline, "full_precision".to_string(), String::new(), String::new(), String::new()),
            };
            for d in degradation_rows(&job.grid_label, job.seed_index, &baseline, &m) {
                rows.push(TrialRow::from_degradation(
                    &config.experiment_id, &preset_label, "evaluate", &bw, &ba, &tf, &d,
                ));
            }
        }
    }

    Ok(TrialResult {
        trial_index: job.trial_index,
        grid_label: job.grid_label.clone(),
        seed: job.seed_index,
        rows,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ─── Built-in presets ────────────────────────────────────────────────────────

/// Named experiment presets reproducing the headline comparisons.
pub fn preset_config(
    name: &str,
    seeds: usize,
    output_dir: &Path,
    checkpoint: Option<PathBuf>,
    steps: usize,
) -> HarnessResult<ExperimentConfig> {
    let task = TaskSpec { kind: crate::toymodel::TaskKind::Induction, seq_len: 32, seed: 1 };
    let fixture = |outliers: Option<OutlierSpec>| FixtureSpec {
        checkpoint: checkpoint.clone(),
        train: if checkpoint.is_some() {
            None
        } else {
            Some(TrainFixture {
                model: ModelConfig { init_seed: 42, ..ModelConfig::default() },
                task,
                steps,
                optimizer: OptimizerConfig::default(),
                train_seed: 1234,
            })
        },
        outliers,
    };
    let outliers = OutlierSpec { channel_fraction: 0.01, scale: 20.0, seed: 7 };
    let eval = EvalSpec { n_batches: 8, batch_size: 32, eval_seed: 700 };
    let kind = match name {
        "figure2" => ExperimentKind::PerturbCompare {
            fixture: fixture(Some(outliers)),
            task,
            preset: Preset::W8A8,
            kinds: vec![
                PerturbKind::MagPos,
                PerturbKind::Gaussian,
                PerturbKind::Uniform,
                PerturbKind::Rademacher,
                PerturbKind::mag_neg(),
                PerturbKind::clip(3.0),
            ],
            eval,
        },
        "clipping" => ExperimentKind::PerturbCompare {
            fixture: fixture(None),
            task,
            preset: Preset::W8A8,
            kinds: vec![
                PerturbKind::clip(3.0),
                PerturbKind::clip(5.0),
                PerturbKind::clip(10.0),
                PerturbKind::Gaussian,
            ],
            eval,
        },
        "table1" => ExperimentKind::QuantCompare {
            fixture: fixture(Some(outliers)),
            task,
            settings: vec![
                QuantSetting { preset: Preset::W4A16, transform: Transform::Identity },
                QuantSetting { preset: Preset::W4A16, transform: Transform::cube_root() },
                QuantSetting { preset: Preset::W8A8, transform: Transform::Identity },
                QuantSetting { preset: Preset::W8A8, transform: Transform::cube_root() },
                QuantSetting { preset: Preset::W4A8, transform: Transform::Identity },
                QuantSetting { preset: Preset::W4A8, transform: Transform::cube_root() },
            ],
            eval,
        },
        other => {
            return Err(HarnessError::Config(format!(
                "unknown preset '{other}' (expected figure2, clipping, or table1)"
            )))
        }
    };
    Ok(ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment_id: format!("preset-{name}"),
        kind,
        base_seed: 42,
        n_seeds: seeds,
        output_dir: output_dir.to_path_buf(),
        parallelism: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("qlab-harness-tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn sweep_config(dir: &Path, n_seeds: usize, parallelism: usize) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment_id: "sweep-test".into(),
            kind: ExperimentKind::ScaleSweep {
                input: InputSource::Draw {
                    dist: DistSpec::Normal { mean: 0.0, std: 1.0 },
                    shape: vec![4096],
                },
                bits: 8,
                transform: Transform::Identity,
                alphas: vec![
                    AlphaSpec::RelativeToAbsmax(0.25),
                    AlphaSpec::RelativeToAbsmax(1.0),
                    AlphaSpec::RelativeToAbsmax(4.0),
                ],
            },
            base_seed: 9,
            n_seeds,
            output_dir: dir.to_path_buf(),
            parallelism,
        }
    }

    #[test]
    fn single_trial_produces_one_row_set() {
        let dir = tmpdir("single");
        let mut config = sweep_config(&dir, 1, 1);
        if let ExperimentKind::ScaleSweep { alphas, .. } = &mut config.kind {
            alphas.truncate(1);
        }
        let out = run(&config).unwrap();
        assert_eq!(out.trials.len(), 1);
        let csv = std::fs::read_to_string(&out.csv_path).unwrap();
        // Header plus the rows of exactly one trial.
        assert_eq!(csv.lines().count(), 1 + out.trials[0].rows.len());
    }

    #[test]
    fn rerun_is_byte_identical_and_parallelism_invariant() {
        let d1 = tmpdir("p1");
        let d2 = tmpdir("p8");
        let c1 = sweep_config(&d1, 3, 1);
        let c8 = ExperimentConfig { output_dir: d2.clone(), parallelism: 8, ..c1.clone() };
        let o1 = run(&c1).unwrap();
        let o8 = run(&c8).unwrap();
        let b1 = std::fs::read(&o1.csv_path).unwrap();
        let b8 = std::fs::read(&o8.csv_path).unwrap();
        assert_eq!(b1, b8);
        // And a second run in place is byte-identical too.
        let o1b = run(&c1).unwrap();
        assert_eq!(b1, std::fs::read(&o1b.csv_path).unwrap());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let good = r#"{
            "schema_version": 1,
            "experiment_id": "x",
            "experiment": "scale_sweep",
            "input": {"draw": {"dist": {"normal": {"mean": 0.0, "std": 1.0}}, "shape": [16]}},
            "bits": 8,
            "alphas": ["1x"],
            "base_seed": 1,
            "output_dir": "/tmp/qlab-unknown-key"
        }"#;
        let parsed = ExperimentConfig::from_json(good).unwrap();
        assert!(matches!(parsed.kind, ExperimentKind::ScaleSweep { .. }));

        let bad = good.replace(
            "\"base_seed\": 1,",
            "\"base_seed\": 1, \"typo_field\": true,",
        );
        let err = ExperimentConfig::from_json(&bad).unwrap_err();
        assert!(
            matches!(&err, HarnessError::Config(msg) if msg.contains("typo_field")),
            "{err}"
        );

        // Unknown keys nested inside payload structs are rejected by serde.
        let nested = good.replace("\"eval_seed\"", "\"eval_sneed\"");
        if nested != good {
            assert!(ExperimentConfig::from_json(&nested).is_err());
        }
    }

    #[test]
    fn alpha_spec_parsing() {
        assert_eq!(AlphaSpec::parse("2x").unwrap(), AlphaSpec::RelativeToAbsmax(2.0));
        assert_eq!(AlphaSpec::parse("0.5").unwrap(), AlphaSpec::Absolute(0.5));
        assert!(AlphaSpec::parse("abc").is_err());
        assert_eq!(AlphaSpec::RelativeToAbsmax(2.0).resolve(3.0), 6.0);
        assert_eq!(AlphaSpec::Absolute(0.5).resolve(3.0), 0.5);
    }

    #[test]
    fn deterministic_rows_ignore_base_seed() {
        let dir = tmpdir("seed-isolation");
        let tensor_path = dir.join("fixed.qtns");
        let t = sample(
            &DistSpec::Normal { mean: 0.0, std: 1.0 },
            vec![512],
            &mut RngStream::new(99),
        )
        .unwrap();
        crate::tensor::write_tensor(&tensor_path, &t).unwrap();
        let config = |out: &str, base_seed: u64| ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment_id: "isolation".into(),
            kind: ExperimentKind::KernelSweep {
                input: InputSource::Path { path: tensor_path.clone() },
                schemes: vec![QuantScheme::absmax(4)],
            },
            base_seed,
            n_seeds: 1,
            output_dir: dir.join(out),
            parallelism: 1,
        };
        // Quantization of a fixed input is deterministic: the metric rows
        // must not move when the base seed does.
        let a = run(&config("a", 1)).unwrap();
        let b = run(&config("b", 2)).unwrap();
        assert_eq!(a.trials[0].rows, b.trials[0].rows);
    }

    #[test]
    fn kernel_sweep_runs() {
        let dir = tmpdir("kernel");
        let config = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment_id: "kernel-test".into(),
            kind: ExperimentKind::KernelSweep {
                input: InputSource::Draw {
                    dist: DistSpec::Normal { mean: 0.0, std: 1.0 },
                    shape: vec![1024],
                },
                schemes: vec![QuantScheme::absmax(4), QuantScheme::absmax(8)],
            },
            base_seed: 3,
            n_seeds: 2,
            output_dir: dir,
            parallelism: 2,
        };
        let out = run(&config).unwrap();
        assert_eq!(out.trials.len(), 4);
        // Coarser quantization has a strictly larger noise norm.
        let l2_of = |label: &str, seed: u64| {
            out.trials
                .iter()
                .find(|t| t.grid_label.starts_with(label) && t.seed == seed)
                .unwrap()
                .rows
                .iter()
                .find(|r| r.metric == "l2_delta")
                .unwrap()
                .value
        };
        for seed in 0..2 {
            assert!(l2_of("b4", seed) > l2_of("b8", seed));
        }
    }
}
