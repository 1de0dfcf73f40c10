//! Uniform and non-uniform fake quantization.
//!
//! `quantize` maps a tensor to integer codes with a per-group scale and
//! zero-point; `dequantize` maps back; `fake_quant` composes the two to
//! simulate low-precision storage in f32. `quant_perturbation` extracts the
//! additive noise tensor Δ = t − fake_quant(t), and `scale_sweep` traces how
//! the noise norm and the clipped fraction respond to the scale factor.
//!
//! Conventions (fixed for the whole crate):
//! - step = α / 2^(b−1) with zero-point z = 2^(b−1) for the symmetric
//!   policies, so α equal to the absolute maximum covers the full signed
//!   range; the one exact +α endpoint lands on code 2^b and is clipped.
//! - rounding is half-to-even;
//! - a group with no usable range (all zeros, or max == min under min-max)
//!   gets the sentinel scale 1 and all codes equal to the zero-point;
//! - the non-uniform path applies an invertible signed power transform
//!   before scaling and its inverse after, and evaluates the scale policy on
//!   the transformed values.

mod io;

pub use io::{read_quantized, write_quantized};

use crate::tensor::{sub, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Errors from scheme validation and quantization.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantError {
    InvalidBits { bits: u8 },
    InvalidFixedScale { alpha: f32 },
    InvalidExponent { exponent: f64 },
    InvalidGroupSize { group_size: usize },
    GroupDivision { axis: usize, extent: usize, group_size: usize },
    AxisOutOfRange { axis: usize, ndim: usize },
    EmptyAlphas,
    UnsortedAlphas,
    NonPositiveAlpha { alpha: f32 },
    CorruptCodes { index: usize, code: u8, max: u8 },
    CorruptScale { group: usize },
    GroupCountMismatch { expected: usize, got: usize },
    Tensor(TensorError),
}

impl fmt::Display for QuantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantError::InvalidBits { bits } => {
                write!(f, "bit-width {bits} outside the supported 2..=8")
            }
            QuantError::InvalidFixedScale { alpha } => {
                write!(f, "fixed scale factor must be positive, got {alpha}")
            }
            QuantError::InvalidExponent { exponent } => {
                write!(f, "signed-power exponent must lie in (0, 1], got {exponent}")
            }
            QuantError::InvalidGroupSize { group_size } => {
                write!(f, "group size must be at least 2, got {group_size}")
            }
            QuantError::GroupDivision { axis, extent, group_size } => {
                write!(
                    f,
                    "group size {group_size} does not divide extent {extent} along axis {axis}"
                )
            }
            QuantError::AxisOutOfRange { axis, ndim } => {
                write!(f, "axis {axis} out of range for rank-{ndim} tensor")
            }
            QuantError::EmptyAlphas => write!(f, "scale sweep needs at least one alpha"),
            QuantError::UnsortedAlphas => write!(f, "alphas must be sorted ascending"),
            QuantError::NonPositiveAlpha { alpha } => {
                write!(f, "alphas must be positive, got {alpha}")
            }
            QuantError::CorruptCodes { index, code, max } => {
                write!(f, "code {code} at index {index} exceeds maximum {max}")
            }
            QuantError::CorruptScale { group } => {
                write!(f, "non-positive or non-finite scale for group {group}")
            }
            QuantError::GroupCountMismatch { expected, got } => {
                write!(f, "expected {expected} quantization groups, found {got}")
            }
            QuantError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for QuantError {}

impl From<TensorError> for QuantError {
    fn from(e: TensorError) -> Self {
        QuantError::Tensor(e)
    }
}

pub type QuantResult<T> = Result<T, QuantError>;

// ─── Scheme ──────────────────────────────────────────────────────────────────

/// How the scale factor of each group is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// α = max |x| of the group; symmetric around zero.
    AbsmaxSymmetric,
    /// step = (max − min) / (2^b − 1) with a data-dependent zero-point.
    MinMaxAsymmetric,
    /// Caller-supplied α, symmetric; values beyond ±α clip.
    Fixed { alpha: f32 },
}

/// Scope over which scale and zero-point are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
    /// `group_size` adjacent channels along `axis` share one scale. The size
    /// must divide the extent; partial trailing groups are rejected.
    PerGroup { axis: usize, group_size: usize },
}

/// Optional invertible reshaping applied around the uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// y = sign(x)·|x|^exponent, inverted as x = sign(y)·|y|^(1/exponent).
    /// Exponents below 1 widen small values and compress large ones, giving
    /// dense quantization bins near zero.
    SignedPower { exponent: f64 },
}

impl Transform {
    pub fn forward(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::SignedPower { exponent } => {
                if x == 0.0 {
                    0.0
                } else {
                    x.signum() * x.abs().powf(exponent)
                }
            }
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            Transform::Identity => y,
            Transform::SignedPower { exponent } => {
                if y == 0.0 {
                    0.0
                } else {
                    y.signum() * y.abs().powf(1.0 / exponent)
                }
            }
        }
    }

    /// Cube root, the default non-uniform choice.
    pub fn cube_root() -> Transform {
        Transform::SignedPower { exponent: 1.0 / 3.0 }
    }
}

/// Full description of one quantization configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScheme {
    pub bits: u8,
    #[serde(default = "default_policy")]
    pub scale_policy: ScalePolicy,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_transform")]
    pub transform: Transform,
}

fn default_policy() -> ScalePolicy {
    ScalePolicy::AbsmaxSymmetric
}

fn default_granularity() -> Granularity {
    Granularity::PerTensor
}

fn default_transform() -> Transform {
    Transform::Identity
}

impl QuantScheme {
    /// Per-tensor symmetric absmax at `bits`, the zero-shot default.
    pub fn absmax(bits: u8) -> QuantScheme {
        QuantScheme {
            bits,
            scale_policy: ScalePolicy::AbsmaxSymmetric,
            granularity: Granularity::PerTensor,
            transform: Transform::Identity,
        }
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> QuantScheme {
        self.granularity = granularity;
        self
    }

    pub fn with_transform(mut self, transform: Transform) -> QuantScheme {
        self.transform = transform;
        self
    }

    pub fn with_policy(mut self, scale_policy: ScalePolicy) -> QuantScheme {
        self.scale_policy = scale_policy;
        self
    }

    /// Largest representable code, 2^b − 1.
    pub fn code_max(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    /// Checks scheme parameters without a target shape.
    pub fn validate(&self) -> QuantResult<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(QuantError::InvalidBits { bits: self.bits });
        }
        if let ScalePolicy::Fixed { alpha } = self.scale_policy {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(QuantError::InvalidFixedScale { alpha });
            }
        }
        if let Transform::SignedPower { exponent } = self.transform {
            if !(exponent > 0.0 && exponent <= 1.0) {
                return Err(QuantError::InvalidExponent { exponent });
            }
        }
        if let Granularity::PerGroup { group_size, .. } = self.granularity {
            if group_size < 2 {
                return Err(QuantError::InvalidGroupSize { group_size });
            }
        }
        Ok(())
    }

    /// Checks scheme parameters against a concrete tensor shape.
    pub fn validate_for(&self, shape: &[usize]) -> QuantResult<()> {
        self.validate()?;
        match self.granularity {
            Granularity::PerTensor => Ok(()),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() {
                    Err(QuantError::AxisOutOfRange { axis, ndim: shape.len() })
                } else {
                    Ok(())
                }
            }
            Granularity::PerGroup { axis, group_size } => {
                if axis >= shape.len() {
                    return Err(QuantError::AxisOutOfRange { axis, ndim: shape.len() });
                }
                if !shape[axis].is_multiple_of(group_size) {
                    return Err(QuantError::GroupDivision {
                        axis,
                        extent: shape[axis],
                        group_size,
                    });
                }
                Ok(())
            }
        }
    }
}

// ─── Grouping ────────────────────────────────────────────────────────────────

/// Maps flat element indices to quantization-group indices.
struct Grouping {
    inner: usize,
    extent: usize,
    chans_per_group: usize,
    count: usize,
}

impl Grouping {
    fn build(shape: &[usize], granularity: &Granularity) -> Grouping {
        match *granularity {
            Granularity::PerTensor => {
                Grouping { inner: 1, extent: 1, chans_per_group: 1, count: 1 }
            }
            Granularity::PerChannel { axis } => {
                let inner: usize = shape[axis + 1..].iter().product();
                Grouping { inner, extent: shape[axis], chans_per_group: 1, count: shape[axis] }
            }
            Granularity::PerGroup { axis, group_size } => {
                let inner: usize = shape[axis + 1..].iter().product();
                Grouping {
                    inner,
                    extent: shape[axis],
                    chans_per_group: group_size,
                    count: shape[axis] / group_size,
                }
            }
        }
    }

    #[inline]
    fn of(&self, flat: usize) -> usize {
        ((flat / self.inner) % self.extent) / self.chans_per_group
    }
}

// ─── Quantized tensor ────────────────────────────────────────────────────────

/// Integer codes plus the metadata needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    scales: Vec<f32>,
    zero_points: Vec<u16>,
    scheme: QuantScheme,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[u16] {
        &self.zero_points
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    /// Structural validation used by the container reader.
    fn validate(&self) -> QuantResult<()> {
        self.scheme.validate_for(&self.shape)?;
        let expected = Grouping::build(&self.shape, &self.scheme.granularity).count;
        if self.scales.len() != expected || self.zero_points.len() != expected {
            return Err(QuantError::GroupCountMismatch {
                expected,
                got: self.scales.len(),
            });
        }
        let max = self.scheme.code_max();
        if let Some(index) = self.codes.iter().position(|&c| c > max) {
            return Err(QuantError::CorruptCodes { index, code: self.codes[index], max });
        }
        for (group, &s) in self.scales.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(QuantError::CorruptScale { group });
            }
        }
        let n: usize = self.shape.iter().product();
        if n != self.codes.len() {
            return Err(QuantError::Tensor(TensorError::LengthMismatch {
                expected: n,
                got: self.codes.len(),
            }));
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        codes: Vec<u8>,
        scales: Vec<f32>,
        zero_points: Vec<u16>,
        scheme: QuantScheme,
        shape: Vec<usize>,
    ) -> QuantResult<QuantizedTensor> {
        let q = QuantizedTensor { codes, scales, zero_points, scheme, shape };
        q.validate()?;
        Ok(q)
    }
}

/// Side information from a quantization pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantInfo {
    /// Elements whose pre-clip code fell outside [0, 2^b − 1].
    pub clipped: usize,
    pub total: usize,
}

impl QuantInfo {
    pub fn clip_fraction(&self) -> f64 {
        self.clipped as f64 / self.total as f64
    }
}

// ─── Operations ──────────────────────────────────────────────────────────────

/// Per-group scale and zero-point from the transformed values.
fn group_params(
    values: &[f32],
    grouping: &Grouping,
    scheme: &QuantScheme,
) -> (Vec<f32>, Vec<u16>, Vec<bool>) {
    let half = 1u32 << (scheme.bits - 1);
    let levels = (1u32 << scheme.bits) - 1;
    let mut mins = vec![f32::INFINITY; grouping.count];
    let mut maxs = vec![f32::NEG_INFINITY; grouping.count];
    for (i, &v) in values.iter().enumerate() {
        let g = grouping.of(i);
        mins[g] = mins[g].min(v);
        maxs[g] = maxs[g].max(v);
    }
    let mut scales = Vec::with_capacity(grouping.count);
    let mut zero_points = Vec::with_capacity(grouping.count);
    let mut degenerate = Vec::with_capacity(grouping.count);
    for g in 0..grouping.count {
        let (s, z, degen) = match scheme.scale_policy {
            ScalePolicy::AbsmaxSymmetric => {
                let absmax = mins[g].abs().max(maxs[g].abs());
                if absmax == 0.0 {
                    (1.0, half as u16, true)
                } else {
                    (absmax / half as f32, half as u16, false)
                }
            }
            ScalePolicy::MinMaxAsymmetric => {
                if maxs[g] == mins[g] {
                    let z = (-mins[g] as f64).round_ties_even().clamp(0.0, levels as f64);
                    (1.0, z as u16, true)
                } else {
                    let s = ((maxs[g] as f64 - mins[g] as f64) / levels as f64) as f32;
                    let z = (-mins[g] as f64 / s as f64)
                        .round_ties_even()
                        .clamp(0.0, levels as f64);
                    (s, z as u16, false)
                }
            }
            ScalePolicy::Fixed { alpha } => (alpha / half as f32, half as u16, false),
        };
        scales.push(s);
        zero_points.push(z);
        degenerate.push(degen);
    }
    (scales, zero_points, degenerate)
}

/// Quantizes `t` under `scheme`, also reporting how many elements clipped.
pub fn quantize_with_info(
    t: &Tensor,
    scheme: &QuantScheme,
) -> QuantResult<(QuantizedTensor, QuantInfo)> {
    scheme.validate_for(t.shape())?;
    let transformed: Vec<f32> = match scheme.transform {
        Transform::Identity => t.data().to_vec(),
        _ => t.data().iter().map(|&x| scheme.transform.forward(x as f64) as f32).collect(),
    };
    let grouping = Grouping::build(t.shape(), &scheme.granularity);
    let (scales, zero_points, degenerate) = group_params(&transformed, &grouping, scheme);
    let code_max = scheme.code_max() as i64;
    let mut codes = Vec::with_capacity(transformed.len());
    let mut clipped = 0usize;
    for (i, &v) in transformed.iter().enumerate() {
        let g = grouping.of(i);
        if degenerate[g] {
            codes.push(zero_points[g] as u8);
            continue;
        }
        let q = (v as f64 / scales[g] as f64).round_ties_even() as i64 + zero_points[g] as i64;
        if q < 0 || q > code_max {
            clipped += 1;
        }
        codes.push(q.clamp(0, code_max) as u8);
    }
    let info = QuantInfo { clipped, total: codes.len() };
    let q = QuantizedTensor {
        codes,
        scales,
        zero_points,
        scheme: *scheme,
        shape: t.shape().to_vec(),
    };
    Ok((q, info))
}

/// Quantizes `t` under `scheme`.
pub fn quantize(t: &Tensor, scheme: &QuantScheme) -> QuantResult<QuantizedTensor> {
    Ok(quantize_with_info(t, scheme)?.0)
}

/// Recovers the f32 tensor encoded by `q`.
pub fn dequantize(q: &QuantizedTensor) -> QuantResult<Tensor> {
    let grouping = Grouping::build(&q.shape, &q.scheme.granularity);
    let mut data = Vec::with_capacity(q.codes.len());
    for (i, &code) in q.codes.iter().enumerate() {
        let g = grouping.of(i);
        let y = (code as i64 - q.zero_points[g] as i64) as f64 * q.scales[g] as f64;
        data.push(q.scheme.transform.inverse(y) as f32);
    }
    Ok(Tensor::new(data, q.shape.clone())?)
}

/// Quantize-then-dequantize: the f32 tensor the low-precision model would see.
pub fn fake_quant(t: &Tensor, scheme: &QuantScheme) -> QuantResult<Tensor> {
    dequantize(&quantize(t, scheme)?)
}

/// The additive noise view of quantization: Δ = t − fake_quant(t), so that
/// t = fake_quant(t) + Δ holds elementwise.
pub fn quant_perturbation(t: &Tensor, scheme: &QuantScheme) -> QuantResult<Tensor> {
    Ok(sub(t, &fake_quant(t, scheme)?)?)
}

/// One row of a scale-factor sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f32,
    pub l2_delta: f64,
    pub clip_fraction: f64,
}

/// Sweeps the fixed scale factor over `alphas` (ascending), reporting the
/// perturbation norm and clipped fraction at each point.
pub fn scale_sweep(
    t: &Tensor,
    scheme_base: &QuantScheme,
    alphas: &[f32],
) -> QuantResult<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(QuantError::EmptyAlphas);
    }
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(QuantError::UnsortedAlphas);
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        if !(alpha > 0.0) {
            return Err(QuantError::NonPositiveAlpha { alpha });
        }
        let scheme = scheme_base.with_policy(ScalePolicy::Fixed { alpha });
        let (q, info) = quantize_with_info(t, &scheme)?;
        let delta = sub(t, &dequantize(&q)?)?;
        rows.push(SweepRow {
            alpha,
            l2_delta: crate::tensor::l2(&delta),
            clip_fraction: info.clip_fraction(),
        });
    }
    Ok(rows)
}

/// All 2^b dequantized grid points of a (bits, scale, zero-point, transform)
/// configuration, in code order.
pub fn dequant_grid(bits: u8, scale: f32, zero_point: u16, transform: &Transform) -> Vec<f32> {
    (0..(1u32 << bits))
        .map(|code| {
            let y = (code as i64 - zero_point as i64) as f64 * scale as f64;
            transform.inverse(y) as f32
        })
        .collect()
}
