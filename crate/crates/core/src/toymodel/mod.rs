//! A small decoder-only transformer with injection hooks.
//!
//! The model is deliberately desk-scale: pre-norm blocks of causal multi-head
//! attention and a GELU FFN, trained with Adam on synthetic sequence tasks.
//! Every linear projection (including the output head) is a named site whose
//! weight, and whose matmul input activation, can be independently quantized
//! or perturbed through an [`InjectionPlan`]. Embeddings and layernorm
//! parameters are trainable but are not injection sites.

mod forward;
mod inject;
mod task;
mod train;

pub use forward::{evaluate, forward, EvalMetrics};
pub use inject::{
    activation_scheme, inject_outliers, weight_scheme, Action, InjectionPlan, Preset,
};
pub use task::{sample_batch, Batch, TaskKind, TaskSpec};
pub use train::{grad_check, train, GradCheckReport, OptimizerConfig, TrainRecord};

use crate::perturb::PerturbError;
use crate::quant::QuantError;
use crate::tensor::{RngStream, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig { field: &'static str },
    TokenOutOfRange { token: u32, vocab: usize },
    UnknownSite { name: String },
    /// Training loss became NaN; reported instead of silently continuing.
    DivergedLoss { step: usize },
    BadCheckpoint(String),
    MissingSite { name: String },
    Tensor(TensorError),
    Quant(QuantError),
    Perturb(PerturbError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig { field } => write!(f, "invalid model config: {field}"),
            ModelError::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocab {vocab}")
            }
            ModelError::UnknownSite { name } => write!(f, "unknown injection site '{name}'"),
            ModelError::DivergedLoss { step } => {
                write!(f, "training diverged: loss became NaN at step {step}")
            }
            ModelError::BadCheckpoint(msg) => write!(f, "bad checkpoint: {msg}"),
            ModelError::MissingSite { name } => {
                write!(f, "checkpoint is missing tensor '{name}'")
            }
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Quant(e) => write!(f, "{e}"),
            ModelError::Perturb(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<QuantError> for ModelError {
    fn from(e: QuantError) -> Self {
        ModelError::Quant(e)
    }
}

impl From<PerturbError> for ModelError {
    fn from(e: PerturbError) -> Self {
        ModelError::Perturb(e)
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

// ─── Config ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d2")]
    pub layers: usize,
    #[serde(default = "d64")]
    pub model_dim: usize,
    #[serde(default = "d4")]
    pub heads: usize,
    /// Defaults to 4 × model_dim.
    #[serde(default)]
    pub ffn_dim: usize,
    #[serde(default = "d64")]
    pub vocab: usize,
    #[serde(default = "d32")]
    pub context: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn d2() -> usize {
    2
}
fn d4() -> usize {
    4
}
fn d32() -> usize {
    32
}
fn d64() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab: 64,
            context: 32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig { field: "layers must be positive" });
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig { field: "heads must divide model_dim" });
        }
        if self.ffn_dim == 0 {
            return Err(ModelError::InvalidConfig { field: "ffn_dim must be positive" });
        }
        if self.vocab < 2 {
            return Err(ModelError::InvalidConfig { field: "vocab must be at least 2" });
        }
        if self.context == 0 {
            return Err(ModelError::InvalidConfig { field: "context must be positive" });
        }
        Ok(())
    }

    /// Fills the ffn_dim default (4d) after deserialization.
    pub fn normalized(mut self) -> Self {
        if self.ffn_dim == 0 {
            self.ffn_dim = 4 * self.model_dim;
        }
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

// ─── Parameters ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub ln1: LnParams,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ln2: LnParams,
    pub w_in: Vec<f32>,
    pub w_out: Vec<f32>,
}

/// All trainable tensors. Also reused (zero-filled) for gradients and Adam
/// moments so the three always share one traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub embed: Vec<f32>,
    pub layers: Vec<LayerTensors>,
    pub final_ln: LnParams,
    pub head: Vec<f32>,
}

impl ParamSet {
    pub fn zeros(config: &ModelConfig) -> ParamSet {
        let d = config.model_dim;
        let ffn = config.ffn_dim;
        let ln = || LnParams { gain: vec![0.0; d], bias: vec![0.0; d] };
        ParamSet {
            embed: vec![0.0; config.vocab * d],
            layers: (0..config.layers)
                .map(|_| LayerTensors {
                    ln1: ln(),
                    wq: vec![0.0; d * d],
                    wk: vec![0.0; d * d],
                    wv: vec![0.0; d * d],
                    wo: vec![0.0; d * d],
                    ln2: ln(),
                    w_in: vec![0.0; d * ffn],
                    w_out: vec![0.0; ffn * d],
                })
                .collect(),
            final_ln: LnParams { gain: vec![0.0; d], bias: vec![0.0; d] },
            head: vec![0.0; d * config.vocab],
        }
    }

    /// All tensors in a fixed traversal order, with their names.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out: Vec<(String, &mut Vec<f32>)> = Vec::new();
        out.push(("embed".to_string(), &mut self.embed));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.ln1.gain"), &mut layer.ln1.gain));
            out.push((format!("layer{l}.ln1.bias"), &mut layer.ln1.bias));
            out.push((format!("layer{l}.attn.wq"), &mut layer.wq));
            out.push((format!("layer{l}.attn.wk"), &mut layer.wk));
            out.push((format!("layer{l}.attn.wv"), &mut layer.wv));
            out.push((format!("layer{l}.attn.wo"), &mut layer.wo));
            out.push((format!("layer{l}.ln2.gain"), &mut layer.ln2.gain));
            out.push((format!("layer{l}.ln2.bias"), &mut layer.ln2.bias));
            out.push((format!("layer{l}.ffn.w_in"), &mut layer.w_in));
            out.push((format!("layer{l}.ffn.w_out"), &mut layer.w_out));
        }
        out.push(("final_ln.gain".to_string(), &mut self.final_ln.gain));
        out.push(("final_ln.bias".to_string(), &mut self.final_ln.bias));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut out: Vec<(String, &Vec<f32>)> = Vec::new();
        out.push(("embed".to_string(), &self.embed));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1.gain"), &layer.ln1.gain));
            out.push((format!("layer{l}.ln1.bias"), &layer.ln1.bias));
            out.push((format!("layer{l}.attn.wq"), &layer.wq));
            out.push((format!("layer{l}.attn.wk"), &layer.wk));
            out.push((format!("layer{l}.attn.wv"), &layer.wv));
            out.push((format!("layer{l}.attn.wo"), &layer.wo));
            out.push((format!("layer{l}.ln2.gain"), &layer.ln2.gain));
            out.push((format!("layer{l}.ln2.bias"), &layer.ln2.bias));
            out.push((format!("layer{l}.ffn.w_in"), &layer.w_in));
            out.push((format!("layer{l}.ffn.w_out"), &layer.w_out));
        }
        out.push(("final_ln.gain".to_string(), &self.final_ln.gain));
        out.push(("final_ln.bias".to_string(), &self.final_ln.bias));
        out.push(("head".to_string(), &self.head));
        out
    }
}

/// Model weights plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
}

impl ModelParams {
    /// Shape of a named parameter tensor.
    pub fn tensor_shape(&self, name: &str) -> Option<Vec<usize>> {
        let c = &self.config;
        let (d, ffn, v) = (c.model_dim, c.ffn_dim, c.vocab);
        if name == "embed" {
            return Some(vec![v, d]);
        }
        if name == "head" {
            return Some(vec![d, v]);
        }
        if name == "final_ln.gain" || name == "final_ln.bias" {
            return Some(vec![d]);
        }
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let layer: usize = rest[..dot].parse().ok()?;
        if layer >= c.layers {
            return None;
        }
        match &rest[dot + 1..] {
            "ln1.gain" | "ln1.bias" | "ln2.gain" | "ln2.bias" => Some(vec![d]),
            "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => Some(vec![d, d]),
            "ffn.w_in" => Some(vec![d, ffn]),
            "ffn.w_out" => Some(vec![ffn, d]),
            _ => None,
        }
    }

    /// Names of the injectable matmul sites, in forward order.
    pub fn site_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.config.layers {
            for suffix in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w_in", "ffn.w_out"] {
                names.push(format!("layer{l}.{suffix}"));
            }
        }
        names.push("head".to_string());
        names
    }

    /// The weight matrix of an injection site as (data, rows, cols).
    pub fn site(&self, name: &str) -> Option<(&[f32], usize, usize)> {
        let c = &self.config;
        let (d, ffn, v) = (c.model_dim, c.ffn_dim, c.vocab);
        if name == "head" {
            return Some((&self.set.head, d, v));
        }
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let layer: usize = rest[..dot].parse().ok()?;
        let lt = self.set.layers.get(layer)?;
        match &rest[dot + 1..] {
            "attn.wq" => Some((&lt.wq, d, d)),
            "attn.wk" => Some((&lt.wk, d, d)),
            "attn.wv" => Some((&lt.wv, d, d)),
            "attn.wo" => Some((&lt.wo, d, d)),
            "ffn.w_in" => Some((&lt.w_in, d, ffn)),
            "ffn.w_out" => Some((&lt.w_out, ffn, d)),
            _ => None,
        }
    }
}

/// Initializes parameters: Gaussian weights with std 0.02, residual
/// projections (wo, w_out) scaled by 1/sqrt(2·layers), layernorm gain 1 and
/// bias 0. Deterministic per stream state.
pub fn init(config: &ModelConfig, rng: &mut RngStream) -> ModelResult<ModelParams> {
    let config = config.normalized();
    config.validate()?;
    let mut set = ParamSet::zeros(&config);
    let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
    for (name, tensor) in set.tensors_mut() {
        if name.ends_with(".gain") {
            tensor.fill(1.0);
        } else if name.ends_with(".bias") {
            tensor.fill(0.0);
        } else {
            let std = if name.ends_with("attn.wo") || name.ends_with("ffn.w_out") {
                0.02 * residual_scale
            } else {
                0.02
            };
            for v in tensor.iter_mut() {
                *v = (std * rng.next_gaussian()) as f32;
            }
        }
    }
    Ok(ModelParams { config, set })
}

// ─── Checkpoints ─────────────────────────────────────────────────────────────

/// Sidecar metadata stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensor_names: Vec<String>,
    pub injection_sites: Vec<String>,
    #[serde(default)]
    pub training: BTreeMap<String, serde_json::Value>,
}

/// Writes `params` as one QTNS file per tensor plus a JSON manifest.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    training: BTreeMap<String, serde_json::Value>,
) -> ModelResult<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(TensorError::from)?;
    let mut tensor_names = Vec::new();
    for (name, data) in params.set.tensors() {
        let shape = params
            .tensor_shape(&name)
            .ok_or_else(|| ModelError::MissingSite { name: name.clone() })?;
        let t = Tensor::new(data.clone(), shape)?;
        crate::tensor::write_tensor(dir.join(format!("{name}.qtns")), &t)?;
        tensor_names.push(name);
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        config: params.config,
        tensor_names,
        injection_sites: params.site_names(),
        training,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json).map_err(TensorError::from)?;
    Ok(())
}

/// Restores a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> ModelResult<(ModelParams, CheckpointManifest)> {
    let dir = dir.as_ref();
    let raw = std::fs::read_to_string(dir.join("manifest.json")).map_err(TensorError::from)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&raw).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    if manifest.format_version != 1 {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let config = manifest.config.normalized();
    config.validate()?;
    let mut params = ModelParams { config, set: ParamSet::zeros(&config) };
    let expected_shapes: Vec<(String, Vec<usize>)> = params
        .set
        .tensors()
        .iter()
        .map(|(name, _)| (name.clone(), params.tensor_shape(name).unwrap()))
        .collect();
    for ((name, tensor), (ename, eshape)) in
        params.set.tensors_mut().into_iter().zip(expected_shapes)
    {
        debug_assert_eq!(name, ename);
        let path = dir.join(format!("{name}.qtns"));
        if !path.exists() {
            return Err(ModelError::MissingSite { name });
        }
        let t = crate::tensor::read_tensor(&path)?;
        if t.shape() != eshape.as_slice() {
            return Err(ModelError::BadCheckpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                eshape
            )));
        }
        *tensor = t.into_data();
    }
    Ok((params, manifest))
}
