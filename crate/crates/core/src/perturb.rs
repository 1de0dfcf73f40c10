//! Artificial perturbation families with matched intensity.
//!
//! Five stochastic kinds mirror the statistical shapes of quantization noise:
//! Gaussian, Uniform, and Rademacher draws are magnitude-independent, while
//! MagPos scales the draw exactly with |x| and MagNeg exactly with
//! 1/(|x|+ε). Each is rescaled so its L2 norm (or population variance)
//! matches a target, normally the native noise of a quantization scheme on
//! the same tensor. The sixth kind, Clip, caps values outside μ ± kσ and is
//! deliberately never rescaled: its severity is the experimental variable.

use crate::quant::{quant_perturbation, QuantError, QuantScheme};
use crate::tensor::{l2, stats, sub, Tensor, TensorError, TensorStats};
use crate::tensor::RngStream;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const DEFAULT_EPS_REL: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum PerturbError {
    /// The raw draw was identically zero but a nonzero intensity was asked.
    DegenerateDraw,
    /// Intensity target must be a finite nonnegative number.
    InvalidTarget { target: f64 },
    /// A kind parameter was out of range.
    InvalidParam { field: &'static str, value: f64 },
    Quant(QuantError),
    Tensor(TensorError),
}

impl fmt::Display for PerturbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbError::DegenerateDraw => {
                write!(f, "raw perturbation draw is all-zero; cannot match a nonzero intensity")
            }
            PerturbError::InvalidTarget { target } => {
                write!(f, "intensity target must be finite and nonnegative, got {target}")
            }
            PerturbError::InvalidParam { field, value } => {
                write!(f, "invalid parameter {field} = {value}")
            }
            PerturbError::Quant(e) => write!(f, "{e}"),
            PerturbError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PerturbError {}

impl From<QuantError> for PerturbError {
    fn from(e: QuantError) -> Self {
        PerturbError::Quant(e)
    }
}

impl From<TensorError> for PerturbError {
    fn from(e: TensorError) -> Self {
        PerturbError::Tensor(e)
    }
}

pub type PerturbResult<T> = Result<T, PerturbError>;

// ─── Specs ───────────────────────────────────────────────────────────────────

/// The perturbation families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    /// δ ~ N(0, 1) before rescaling.
    Gaussian,
    /// δ ~ U(−1, 1) before rescaling.
    Uniform,
    /// δ = ±1 with equal probability: constant size, random sign.
    Rademacher,
    /// δ = ±|x|: magnitude exactly proportional to the input.
    MagPos,
    /// δ = ±1/(|x| + ε) with ε = eps_rel · absmax: magnitude exactly
    /// inversely proportional to the input.
    MagNeg { eps_rel: f32 },
    /// Values outside [μ − kσ, μ + kσ] are capped to the nearer bound
    /// (upper bound only when `one_sided`). Never rescaled.
    Clip { k: f32, #[serde(default)] one_sided: bool },
}

impl PerturbKind {
    pub fn mag_neg() -> PerturbKind {
        PerturbKind::MagNeg { eps_rel: DEFAULT_EPS_REL }
    }

    pub fn clip(k: f32) -> PerturbKind {
        PerturbKind::Clip { k, one_sided: false }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PerturbKind::Gaussian => "gaussian",
            PerturbKind::Uniform => "uniform",
            PerturbKind::Rademacher => "rademacher",
            PerturbKind::MagPos => "mag_pos",
            PerturbKind::MagNeg { .. } => "mag_neg",
            PerturbKind::Clip { .. } => "clip",
        }
    }
}

/// How strong the perturbation should be.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityTarget {
    /// Rescale to this exact L2 norm.
    FixedL2 { target: f64 },
    /// Rescale to the L2 norm of `quant_perturbation(t, scheme)` on the same
    /// tensor.
    MatchQuantL2 { scheme: QuantScheme },
    /// Rescale to the population variance of the native quantization noise.
    MatchQuantVariance { scheme: QuantScheme },
    /// Rescale to the L2 norm of the clip-at-μ±kσ perturbation of the same
    /// tensor (the fair-comparison control for clipping experiments).
    MatchClipL2 {
        k: f32,
        #[serde(default)]
        one_sided: bool,
    },
}

impl Default for IntensityTarget {
    fn default() -> Self {
        IntensityTarget::FixedL2 { target: 0.0 }
    }
}

/// A perturbation kind plus its intensity policy and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    #[serde(default)]
    pub intensity: IntensityTarget,
    pub seed: u64,
}

impl PerturbSpec {
    /// Validates parameters; `Ok` carries non-fatal warnings.
    pub fn validate(&self) -> PerturbResult<Vec<String>> {
        match self.kind {
            PerturbKind::MagNeg { eps_rel } if !(eps_rel > 0.0) => {
                return Err(PerturbError::InvalidParam {
                    field: "eps_rel",
                    value: eps_rel as f64,
                });
            }
            PerturbKind::Clip { k, .. } if !(k > 0.0) => {
                return Err(PerturbError::InvalidParam { field: "k", value: k as f64 });
            }
            _ => {}
        }
        match self.intensity {
            IntensityTarget::FixedL2 { target } if !(target >= 0.0) || !target.is_finite() => {
                return Err(PerturbError::InvalidTarget { target });
            }
            IntensityTarget::MatchClipL2 { k, .. } if !(k > 0.0) => {
                return Err(PerturbError::InvalidParam { field: "k", value: k as f64 });
            }
            _ => {}
        }
        let mut warnings = Vec::new();
        if matches!(self.kind, PerturbKind::Clip { .. })
            && self.intensity != IntensityTarget::default()
        {
            warnings.push(
                "clip perturbation ignores the intensity field; its severity is k".to_string(),
            );
        }
        Ok(warnings)
    }
}

// ─── Operations ──────────────────────────────────────────────────────────────

/// The clip perturbation itself: clipped(t) − t with the band μ ± kσ frozen
/// from `t`'s own statistics.
pub fn clip_delta(t: &Tensor, k: f32, one_sided: bool) -> PerturbResult<Tensor> {
    if !(k > 0.0) {
        return Err(PerturbError::InvalidParam { field: "k", value: k as f64 });
    }
    let st = stats(t)?;
    Ok(sub(&clip_to_band(t, &st, k, one_sided), t)?)
}

/// Caps values of `t` outside the band implied by `st` and `k`. Statistics are
/// frozen from the original tensor, so applying this twice equals once.
fn clip_to_band(t: &Tensor, st: &TensorStats, k: f32, one_sided: bool) -> Tensor {
    let hi = (st.mean + k as f64 * st.std) as f32;
    let lo = (st.mean - k as f64 * st.std) as f32;
    t.map(|x| {
        if x > hi {
            hi
        } else if !one_sided && x < lo {
            lo
        } else {
            x
        }
    })
}

/// Rescales `delta` so its L2 norm equals `target_l2` exactly (to rounding),
/// preserving direction elementwise.
pub fn match_intensity(delta: &Tensor, target_l2: f64) -> PerturbResult<Tensor> {
    if !(target_l2 >= 0.0) || !target_l2.is_finite() {
        return Err(PerturbError::InvalidTarget { target: target_l2 });
    }
    if target_l2 == 0.0 {
        return Ok(Tensor::zeros(delta.shape().to_vec())?);
    }
    let norm = l2(delta);
    if norm == 0.0 {
        return Err(PerturbError::DegenerateDraw);
    }
    let factor = target_l2 / norm;
    Ok(delta.map(|x| (x as f64 * factor) as f32))
}

/// L2 norm of the native quantization noise of `t` under `scheme`.
pub fn native_intensity(t: &Tensor, scheme: &QuantScheme) -> PerturbResult<f64> {
    Ok(l2(&quant_perturbation(t, scheme)?))
}

/// Population variance of the native quantization noise.
pub fn native_variance(t: &Tensor, scheme: &QuantScheme) -> PerturbResult<f64> {
    let delta = quant_perturbation(t, scheme)?;
    let st = stats(&delta)?;
    Ok(st.std * st.std)
}

/// Fraction of elements strictly outside [μ − kσ, μ + kσ].
pub fn clip_fraction(t: &Tensor, k: f32) -> f64 {
    debug_assert!(k > 0.0);
    let st = stats(t).expect("tensors are non-empty by invariant");
    let hi = st.mean + k as f64 * st.std;
    let lo = st.mean - k as f64 * st.std;
    let outside = t
        .data()
        .iter()
        .filter(|&&x| (x as f64) > hi || (x as f64) < lo)
        .count();
    outside as f64 / t.len() as f64
}

fn raw_draw(t: &Tensor, kind: &PerturbKind, rng: &mut RngStream) -> PerturbResult<Vec<f32>> {
    let n = t.len();
    let mut raw = Vec::with_capacity(n);
    match *kind {
        PerturbKind::Gaussian => {
            for _ in 0..n {
                raw.push(rng.next_gaussian() as f32);
            }
        }
        PerturbKind::Uniform => {
            for _ in 0..n {
                raw.push(rng.next_range(-1.0, 1.0) as f32);
            }
        }
        PerturbKind::Rademacher => {
            for _ in 0..n {
                raw.push(rng.next_sign() as f32);
            }
        }
        PerturbKind::MagPos => {
            for &x in t.data() {
                raw.push(rng.next_sign() as f32 * x.abs());
            }
        }
        PerturbKind::MagNeg { eps_rel } => {
            if !(eps_rel > 0.0) {
                return Err(PerturbError::InvalidParam {
                    field: "eps_rel",
                    value: eps_rel as f64,
                });
            }
            let eps = eps_rel * stats(t)?.absmax;
            if eps == 0.0 {
                // All-zero tensor: fall back to plain random signs so the
                // draw stays finite; the zero-intensity target zeroes it out.
                for _ in 0..n {
                    raw.push(rng.next_sign() as f32);
                }
            } else {
                for &x in t.data() {
                    raw.push(rng.next_sign() as f32 / (x.abs() + eps));
                }
            }
        }
        PerturbKind::Clip { .. } => unreachable!("clip handled before raw draws"),
    }
    Ok(raw)
}

/// Generates the perturbation tensor Δ for `t` under `spec`.
///
/// All kinds except Clip are rescaled to the intensity target; Clip returns
/// `clipped(t) − t` as-is.
pub fn gen_perturbation(
    t: &Tensor,
    spec: &PerturbSpec,
    rng: &mut RngStream,
) -> PerturbResult<Tensor> {
    spec.validate()?;
    if let PerturbKind::Clip { k, one_sided } = spec.kind {
        return clip_delta(t, k, one_sided);
    }
    let raw = Tensor::new(raw_draw(t, &spec.kind, rng)?, t.shape().to_vec())?;
    match spec.intensity {
        IntensityTarget::FixedL2 { target } => match_intensity(&raw, target),
        IntensityTarget::MatchQuantL2 { scheme } => {
            match_intensity(&raw, native_intensity(t, &scheme)?)
        }
        IntensityTarget::MatchClipL2 { k, one_sided } => {
            match_intensity(&raw, l2(&clip_delta(t, k, one_sided)?))
        }
        IntensityTarget::MatchQuantVariance { scheme } => {
            let target_var = native_variance(t, &scheme)?;
            if target_var == 0.0 {
                return Ok(Tensor::zeros(t.shape().to_vec())?);
            }
            let st = stats(&raw)?;
            let raw_var = st.std * st.std;
            if raw_var == 0.0 {
                return Err(PerturbError::DegenerateDraw);
            }
            let factor = (target_var / raw_var).sqrt();
            Ok(raw.map(|x| (x as f64 * factor) as f32))
        }
    }
}

/// Convenience: derive the stream from the spec's own seed.
pub fn gen_perturbation_seeded(t: &Tensor, spec: &PerturbSpec) -> PerturbResult<Tensor> {
    let mut rng = RngStream::new(spec.seed);
    gen_perturbation(t, spec, &mut rng)
}
