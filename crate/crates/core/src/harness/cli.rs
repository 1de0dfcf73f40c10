//! Command-line interface over the lab's operations.
//!
//! Exit codes: 0 success, 1 usage error, 2 input error, 3 numerical failure
//! (diverged loss, degenerate draws, non-finite data).

use super::report::fmt_float;
use super::{
    aggregate_report, is_numeric_failure, preset_config, read_rows, run, AlphaSpec,
    EvalSpec, ExperimentConfig, HarnessError, HarnessResult, QuantSetting,
};
use crate::perturb::{
    clip_fraction, gen_perturbation_seeded, IntensityTarget, PerturbKind, PerturbSpec,
};
use crate::quant::{
    dequantize, quantize_with_info, read_quantized, scale_sweep, write_quantized, Granularity,
    QuantScheme, ScalePolicy, Transform,
};
use crate::tensor::{
    add, l2, read_tensor, sample, stats, sub, write_tensor, DistSpec, RngStream,
};
use crate::toymodel::{
    evaluate, inject_outliers, load_checkpoint, InjectionPlan, ModelConfig, OptimizerConfig,
    Preset, TaskKind, TaskSpec,
};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "qlab",
    about = "Quantization and perturbation laboratory",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SchemeArgs {
    /// Bit-width in 2..=8.
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Scale policy: absmax, minmax, or fixed (requires --alpha).
    #[arg(long, default_value = "absmax")]
    policy: String,
    /// Fixed scale factor for --policy fixed.
    #[arg(long)]
    alpha: Option<f32>,
    /// per-tensor, per-channel:AXIS, or per-group:AXIS:SIZE.
    #[arg(long, default_value = "per-tensor")]
    granularity: String,
    /// identity, or signed-power[:EXPONENT] (default exponent 1/3).
    #[arg(long, default_value = "identity")]
    transform: String,
}

impl SchemeArgs {
    fn build(&self) -> HarnessResult<QuantScheme> {
        let scale_policy = match self.policy.as_str() {
            "absmax" => ScalePolicy::AbsmaxSymmetric,
            "minmax" => ScalePolicy::MinMaxAsymmetric,
            "fixed" => ScalePolicy::Fixed {
                alpha: self.alpha.ok_or_else(|| {
                    HarnessError::Config("--policy fixed requires --alpha".into())
                })?,
            },
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown policy '{other}' (absmax, minmax, fixed)"
                )))
            }
        };
        let granularity = parse_granularity(&self.granularity)?;
        let transform = parse_transform(&self.transform)?;
        let scheme = QuantScheme { bits: self.bits, scale_policy, granularity, transform };
        scheme.validate()?;
        Ok(scheme)
    }
}

fn parse_granularity(s: &str) -> HarnessResult<Granularity> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["per-tensor"] => Ok(Granularity::PerTensor),
        ["per-channel", axis] => Ok(Granularity::PerChannel {
            axis: axis
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad axis '{axis}': {e}")))?,
        }),
        ["per-group", axis, size] => Ok(Granularity::PerGroup {
            axis: axis
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad axis '{axis}': {e}")))?,
            group_size: size
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad group size '{size}': {e}")))?,
        }),
        _ => Err(HarnessError::Config(format!(
            "unknown granularity '{s}' (per-tensor, per-channel:AXIS, per-group:AXIS:SIZE)"
        ))),
    }
}

fn parse_transform(s: &str) -> HarnessResult<Transform> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["identity"] => Ok(Transform::Identity),
        ["signed-power"] => Ok(Transform::cube_root()),
        ["signed-power", exp] => Ok(Transform::SignedPower {
            exponent: exp
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad exponent '{exp}': {e}")))?,
        }),
        _ => Err(HarnessError::Config(format!(
            "unknown transform '{s}' (identity, signed-power[:EXPONENT])"
        ))),
    }
}

fn parse_shape(s: &str) -> HarnessResult<Vec<usize>> {
    s.split('x')
        .map(|part| {
            part.parse::<usize>()
                .map_err(|e| HarnessError::Config(format!("bad shape '{s}': {e}")))
        })
        .collect()
}

fn parse_task(s: &str, seq_len: usize, seed: u64) -> HarnessResult<TaskSpec> {
    let kind = match s.split(':').collect::<Vec<_>>().as_slice() {
        ["copy"] => TaskKind::Copy,
        ["induction"] => TaskKind::Induction,
        ["modular-add", m] => TaskKind::ModularAdd {
            modulus: m
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad modulus '{m}': {e}")))?,
        },
        _ => {
            return Err(HarnessError::Config(format!(
                "unknown task '{s}' (copy, induction, modular-add:M)"
            )))
        }
    };
    Ok(TaskSpec { kind, seq_len, seed })
}

fn parse_setting(s: &str) -> HarnessResult<QuantSetting> {
    let (preset_str, style) = s
        .rsplit_once('-')
        .ok_or_else(|| HarnessError::Config(format!("bad setting '{s}'")))?;
    let preset = match preset_str {
        "w4a16" => Preset::W4A16,
        "w8a8" => Preset::W8A8,
        "w4a8" => Preset::W4A8,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown preset '{other}' (w4a16, w8a8, w4a8)"
            )))
        }
    };
    let transform = match style {
        "uniform" => Transform::Identity,
        "nonuniform" => Transform::cube_root(),
        other => {
            return Err(HarnessError::Config(format!(
                "unknown style '{other}' (uniform, nonuniform)"
            )))
        }
    };
    Ok(QuantSetting { preset, transform })
}

#[derive(Subcommand)]
enum Command {
    /// Draw a tensor from a distribution and write it as QTNS.
    Gen {
        /// normal, uniform, laplace, or outlier.
        #[arg(long)]
        dist: String,
        #[arg(long, default_value_t = 0.0)]
        mean: f64,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long, default_value_t = -1.0)]
        lo: f64,
        #[arg(long, default_value_t = 1.0)]
        hi: f64,
        #[arg(long, default_value_t = 0.0)]
        loc: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        #[arg(long, default_value_t = 20.0)]
        scale_out: f64,
        /// Extents separated by x, e.g. 128x64.
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print descriptive statistics of a QTNS tensor.
    Stats {
        #[arg(long, alias = "in")]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Quantize a QTNS tensor into a QTNQ container.
    Quantize {
        #[arg(long, alias = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Recover the f32 tensor from a QTNQ container.
    Dequantize {
        #[arg(long, alias = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize-then-dequantize in one step.
    FakeQuant {
        #[arg(long, alias = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Generate a perturbation tensor for a QTNS input.
    Perturb {
        #[arg(long, alias = "in")]
        input: PathBuf,
        /// gaussian, uniform, rademacher, mag-pos, mag-neg, clip.
        #[arg(long)]
        kind: String,
        /// Clip threshold multiplier.
        #[arg(long, default_value_t = 3.0)]
        k: f32,
        #[arg(long, default_value_t = 1e-3)]
        eps_rel: f32,
        /// fixed:TAU, match-quant, match-quant-var, or match-clip:K.
        #[arg(long, default_value = "match-quant")]
        intensity: String,
        #[command(flatten)]
        scheme: SchemeArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write t + Δ instead of Δ.
        #[arg(long)]
        apply: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the fixed scale factor and report noise and clipping.
    SweepScale {
        #[arg(long, alias = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u8,
        #[arg(long, default_value = "identity")]
        transform: String,
        /// Comma-separated; plain numbers are absolute, Nx is relative to
        /// absmax (e.g. 0.25x,1x,4x).
        #[arg(long)]
        alphas: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy transformer and write a checkpoint directory.
    TrainToy {
        /// copy, induction, or modular-add:M.
        #[arg(long, default_value = "copy")]
        task: String,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        model_dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 32)]
        context: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint, optionally under a quantization setting.
    EvalToy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "induction")]
        task: String,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        /// w4a16|w8a8|w4a8 - uniform|nonuniform, e.g. w8a8-nonuniform.
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        outlier_scale: Option<f32>,
        #[arg(long, default_value_t = 0.01)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 7)]
        outlier_seed: u64,
        #[arg(long, default_value_t = 8)]
        eval_batches: usize,
        #[arg(long, default_value_t = 700)]
        eval_seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Run an experiment from a JSON config or a named preset.
    Experiment {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// figure2, clipping, or table1.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 4)]
        seeds: usize,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
        /// Reuse a trained checkpoint for preset experiments.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training steps when a preset trains its own fixture.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Aggregate a trials.csv into per-setting summaries and .dat files.
    Report {
        #[arg(long, alias = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Parses `args` and executes one subcommand, returning the process exit
/// code.
pub fn cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if is_numeric_failure(&e) {
                EXIT_NUMERIC
            } else {
                EXIT_INPUT
            }
        }
    }
}

#[allow(clippy::too_many_lines)]
fn dispatch(command: Command) -> HarnessResult<()> {
    match command {
        Command::Gen {
            dist, mean, std, lo, hi, loc, scale, p_out, scale_out, shape, seed, out,
        } => {
            let dist = match dist.as_str() {
                "normal" => DistSpec::Normal { mean, std },
                "uniform" => DistSpec::Uniform { lo, hi },
                "laplace" => DistSpec::Laplace { loc, scale },
                "outlier" => DistSpec::OutlierMixture { p_out, scale_out },
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown distribution '{other}' (normal, uniform, laplace, outlier)"
                    )))
                }
            };
            let shape = parse_shape(&shape)?;
            let tensor = sample(&dist, shape, &mut RngStream::new(seed))?;
            write_tensor(&out, &tensor)?;
            let s = stats(&tensor)?;
            println!(
                "wrote {} ({} elements): mean {} std {} absmax {}",
                out.display(),
                tensor.len(),
                fmt_float(s.mean),
                fmt_float(s.std),
                fmt_float(s.absmax as f64)
            );
        }
        Command::Stats { input, json } => {
            let tensor = read_tensor(&input)?;
            let s = stats(&tensor)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&s)
                        .map_err(|e| HarnessError::Io(e.to_string()))?
                );
            } else {
                println!("shape   {:?}", tensor.shape());
                println!("count   {}", s.count);
                println!("mean    {}", fmt_float(s.mean));
                println!("std     {}", fmt_float(s.std));
                println!("min     {}", fmt_float(s.min as f64));
                println!("max     {}", fmt_float(s.max as f64));
                println!("absmax  {}", fmt_float(s.absmax as f64));
                println!("l2norm  {}", fmt_float(s.l2norm));
                println!("kurtosis {}", fmt_float(s.kurtosis));
            }
        }
        Command::Quantize { input, out, scheme } => {
            let tensor = read_tensor(&input)?;
            let scheme = scheme.build()?;
            let (q, info) = quantize_with_info(&tensor, &scheme)?;
            write_quantized(&out, &q)?;
            let delta = sub(&tensor, &dequantize(&q)?)?;
            println!(
                "wrote {} ({} groups): l2_delta {} clip_fraction {}",
                out.display(),
                q.group_count(),
                fmt_float(l2(&delta)),
                fmt_float(info.clip_fraction())
            );
        }
        Command::Dequantize { input, out } => {
            let q = read_quantized(&input)?;
            let tensor = dequantize(&q)?;
            write_tensor(&out, &tensor)?;
            println!("wrote {} (shape {:?})", out.display(), tensor.shape());
        }
        Command::FakeQuant { input, out, scheme } => {
            let tensor = read_tensor(&input)?;
            let scheme = scheme.build()?;
            let (q, info) = quantize_with_info(&tensor, &scheme)?;
            let recovered = dequantize(&q)?;
            write_tensor(&out, &recovered)?;
            let delta = sub(&tensor, &recovered)?;
            println!(
                "wrote {}: l2_delta {} clip_fraction {}",
                out.display(),
                fmt_float(l2(&delta)),
                fmt_float(info.clip_fraction())
            );
        }
        Command::Perturb { input, kind, k, eps_rel, intensity, scheme, seed, apply, out } => {
            let tensor = read_tensor(&input)?;
            let kind = match kind.as_str() {
                "gaussian" => PerturbKind::Gaussian,
                "uniform" => PerturbKind::Uniform,
                "rademacher" => PerturbKind::Rademacher,
                "mag-pos" => PerturbKind::MagPos,
                "mag-neg" => PerturbKind::MagNeg { eps_rel },
                "clip" => PerturbKind::Clip { k, one_sided: false },
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown kind '{other}' \
                         (gaussian, uniform, rademacher, mag-pos, mag-neg, clip)"
                    )))
                }
            };
            let intensity = match intensity.split(':').collect::<Vec<_>>().as_slice() {
                ["fixed", tau] => IntensityTarget::FixedL2 {
                    target: tau.parse().map_err(|e| {
                        HarnessError::Config(format!("bad intensity '{tau}': {e}"))
                    })?,
                },
                ["match-quant"] => IntensityTarget::MatchQuantL2 { scheme: scheme.build()? },
                ["match-quant-var"] => {
                    IntensityTarget::MatchQuantVariance { scheme: scheme.build()? }
                }
                ["match-clip", kk] => IntensityTarget::MatchClipL2 {
                    k: kk.parse().map_err(|e| {
                        HarnessError::Config(format!("bad clip k '{kk}': {e}"))
                    })?,
                    one_sided: false,
                },
                _ => {
                    return Err(HarnessError::Config(format!(
                        "unknown intensity '{intensity}' \
                         (fixed:TAU, match-quant, match-quant-var, match-clip:K)"
                    )))
                }
            };
            let spec = PerturbSpec { kind, intensity, seed };
            for warning in spec.validate()? {
                eprintln!("warning: {warning}");
            }
            let delta = gen_perturbation_seeded(&tensor, &spec)?;
            let result = if apply { add(&tensor, &delta)? } else { delta.clone() };
            write_tensor(&out, &result)?;
            println!(
                "wrote {}: l2_delta {}{}",
                out.display(),
                fmt_float(l2(&delta)),
                if matches!(spec.kind, PerturbKind::Clip { .. }) {
                    format!(" clip_fraction {}", fmt_float(clip_fraction(&tensor, k)))
                } else {
                    String::new()
                }
            );
        }
        Command::SweepScale { input, bits, transform, alphas, out } => {
            let tensor = read_tensor(&input)?;
            let transform = parse_transform(&transform)?;
            let specs: Vec<AlphaSpec> = alphas
                .split(',')
                .map(|s| AlphaSpec::parse(s).map_err(HarnessError::Config))
                .collect::<HarnessResult<_>>()?;
            let reference = match transform {
                Transform::Identity => stats(&tensor)?.absmax,
                tf => tensor
                    .data()
                    .iter()
                    .map(|&x| tf.forward(x as f64).abs() as f32)
                    .fold(0.0f32, f32::max),
            };
            let mut resolved: Vec<f32> = specs.iter().map(|a| a.resolve(reference)).collect();
            resolved.sort_by(f32::total_cmp);
            let scheme = QuantScheme::absmax(bits).with_transform(transform);
            let rows = scale_sweep(&tensor, &scheme, &resolved)?;
            let mut body = String::from("alpha,l2_delta,clip_fraction\n");
            for r in &rows {
                body.push_str(&format!(
                    "{},{},{}\n",
                    fmt_float(r.alpha as f64),
                    fmt_float(r.l2_delta),
                    fmt_float(r.clip_fraction)
                ));
                println!(
                    "alpha {} l2_delta {} clip_fraction {}",
                    fmt_float(r.alpha as f64),
                    fmt_float(r.l2_delta),
                    fmt_float(r.clip_fraction)
                );
            }
            std::fs::write(&out, body)?;
        }
        Command::TrainToy {
            task, seq_len, steps, seed, lr, batch_size, layers, model_dim, heads, vocab,
            context, out_dir,
        } => {
            let task = parse_task(&task, seq_len, seed)?;
            let model = ModelConfig {
                layers,
                model_dim,
                heads,
                ffn_dim: 4 * model_dim,
                vocab,
                context,
                init_seed: seed,
            };
            let optimizer = OptimizerConfig { lr, batch_size, ..OptimizerConfig::default() };
            let config = ExperimentConfig {
                schema_version: super::SCHEMA_VERSION,
                experiment_id: format!("train-{}", task.label()),
                kind: super::ExperimentKind::ToyTrain {
                    model,
                    task,
                    steps,
                    optimizer,
                    checkpoint_out: out_dir.clone(),
                    eval: Some(EvalSpec { n_batches: 8, batch_size: 32, eval_seed: 700 }),
                },
                base_seed: seed,
                n_seeds: 1,
                output_dir: out_dir.clone(),
                parallelism: 1,
            };
            let output = run(&config)?;
            for row in output.trials.iter().flat_map(|t| &t.rows) {
                println!("{} {}", row.metric, fmt_float(row.value));
            }
            println!("checkpoint written to {}", out_dir.display());
        }
        Command::EvalToy {
            checkpoint, task, seq_len, setting, outlier_scale, outlier_fraction,
            outlier_seed, eval_batches, eval_seed, json,
        } => {
            let (mut params, _) = load_checkpoint(&checkpoint)?;
            if let Some(scale) = outlier_scale {
                inject_outliers(&mut params, outlier_fraction, scale, outlier_seed);
            }
            let task = parse_task(&task, seq_len, 0)?;
            let plan = match &setting {
                Some(s) => {
                    let setting = parse_setting(s)?;
                    InjectionPlan::quantize_preset(&params, setting.preset, setting.transform)
                }
                None => InjectionPlan::empty(),
            };
            let m = evaluate(&params, &task, &plan, eval_batches, 32, eval_seed)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&m)
                        .map_err(|e| HarnessError::Io(e.to_string()))?
                );
            } else {
                println!(
                    "setting {} accuracy {} ce_loss {} perplexity {}",
                    setting.as_deref().unwrap_or("full-precision"),
                    fmt_float(m.accuracy),
                    fmt_float(m.ce_loss),
                    fmt_float(m.perplexity)
                );
            }
        }
        Command::Experiment { config, preset, seeds, out_dir, checkpoint, steps } => {
            let config = match (config, preset) {
                (Some(path), None) => ExperimentConfig::from_path(path)?,
                (None, Some(name)) => {
                    preset_config(&name, seeds, &out_dir, checkpoint, steps)?
                }
                _ => {
                    return Err(HarnessError::Config(
                        "pass exactly one of --config or --preset".into(),
                    ))
                }
            };
            let output = run(&config)?;
            println!(
                "{} trials -> {}",
                output.trials.len(),
                output.csv_path.display()
            );
            for trial in &output.trials {
                for row in &trial.rows {
                    println!(
                        "{} kind={} seed={} {}={} (baseline {})",
                        row.preset, row.kind, row.seed, row.metric,
                        fmt_float(row.value), fmt_float(row.baseline)
                    );
                }
            }
        }
        Command::Report { input, out_dir } => {
            let rows = read_rows(&input)?;
            let written = aggregate_report(&rows, &out_dir)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
