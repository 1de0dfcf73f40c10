//! Dense f32 tensors, descriptive statistics, and seeded sampling.
//!
//! A [`Tensor`] is a row-major `Vec<f32>` plus a shape. Construction rejects
//! non-finite values and zero extents, so every tensor in the crate is finite
//! and non-empty by invariant. Reductions (mean, std, norms) accumulate in
//! f64 to keep large inputs stable.

mod io;
pub mod rng;

pub use io::{read_tensor, write_tensor};
pub use rng::{mix_seed, RngStream};

/// Byte-level header helpers shared with the quantized container.
pub(crate) mod io_helpers {
    pub(crate) use super::io::{
        read_exact, read_f32, read_shape, read_u16, read_u32, read_u64, write_shape,
    };
}

use serde::{Deserialize, Serialize};
use std::fmt;

/// Errors from tensor construction, arithmetic, and container I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape extents multiply to a different length than the data carries.
    LengthMismatch { expected: usize, got: usize },
    /// A shape extent was zero.
    ZeroExtent { axis: usize },
    /// Too many dimensions for the container format.
    TooManyDims { ndim: usize },
    /// A NaN or infinity at `index`.
    NonFinite { index: usize },
    /// Binary op on incompatible shapes.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// Empty input where a reduction needs at least one element.
    EmptyInput(&'static str),
    /// A distribution parameter was out of range; names the offending field.
    InvalidParam { field: &'static str, value: f64 },
    /// Container file did not start with the expected magic bytes.
    BadMagic { found: [u8; 4] },
    /// Container version not understood.
    UnsupportedVersion { found: u32 },
    /// Container dtype code not understood.
    UnsupportedDtype { found: u8 },
    /// Malformed container header field.
    BadHeader(&'static str),
    /// File ended before the declared payload.
    UnexpectedEof,
    /// Underlying filesystem failure.
    Io(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::ZeroExtent { axis } => {
                write!(f, "shape extent at axis {axis} must be positive")
            }
            TensorError::TooManyDims { ndim } => {
                write!(f, "tensor rank {ndim} exceeds the supported 1..=8")
            }
            TensorError::NonFinite { index } => {
                write!(f, "non-finite value at flat index {index}")
            }
            TensorError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            TensorError::EmptyInput(what) => write!(f, "empty input: {what}"),
            TensorError::InvalidParam { field, value } => {
                write!(f, "invalid parameter {field} = {value}")
            }
            TensorError::BadMagic { found } => {
                write!(f, "bad magic {found:?}, not a QTNS container")
            }
            TensorError::UnsupportedVersion { found } => {
                write!(f, "unsupported container version {found}")
            }
            TensorError::UnsupportedDtype { found } => {
                write!(f, "unsupported dtype code {found}")
            }
            TensorError::BadHeader(what) => write!(f, "malformed header: {what}"),
            TensorError::UnexpectedEof => write!(f, "unexpected end of file"),
            TensorError::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            TensorError::UnexpectedEof
        } else {
            TensorError::Io(e.to_string())
        }
    }
}

pub type TensorResult<T> = Result<T, TensorError>;

// ─── Tensor ──────────────────────────────────────────────────────────────────

/// Dense row-major f32 tensor. Finite and non-empty by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating shape/data agreement and finiteness.
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> TensorResult<Self> {
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { axis });
        }
        if shape.is_empty() || shape.len() > 8 {
            return Err(TensorError::TooManyDims { ndim: shape.len() });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { expected, got: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_slice(data: &[f32]) -> TensorResult<Self> {
        Tensor::new(data.to_vec(), vec![data.len()])
    }

    pub fn zeros(shape: Vec<usize>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(vec![0.0; n], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Elementwise map; the caller keeps values finite.
    pub(crate) fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Tensor) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    a.check_same_shape(b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Elementwise difference.
pub fn sub(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    a.check_same_shape(b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

/// Scalar multiple.
pub fn scale(a: &Tensor, c: f32) -> Tensor {
    a.map(|x| c * x)
}

/// Euclidean norm, accumulated in f64.
pub fn l2(a: &Tensor) -> f64 {
    a.data.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

// ─── Statistics ──────────────────────────────────────────────────────────────

/// Descriptive statistics of a tensor. `std` is the population convention
/// (divide by count); `kurtosis` is the excess kurtosis (0 for a Gaussian,
/// and defined as 0 for constant input).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TensorStats {
    pub mean: f64,
    pub std: f64,
    pub min: f32,
    pub max: f32,
    pub absmax: f32,
    pub l2norm: f64,
    pub kurtosis: f64,
    pub count: usize,
}

impl TensorStats {
    /// Two-pass computation over a raw slice; errors on empty input.
    pub fn compute(values: &[f32]) -> TensorResult<TensorStats> {
        if values.is_empty() {
            return Err(TensorError::EmptyInput("stats"));
        }
        let n = values.len() as f64;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &v in values {
            sum += v as f64;
            sumsq += v as f64 * v as f64;
            min = min.min(v);
            max = max.max(v);
        }
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        let mut m2 = 0.0f64;
        let mut m4 = 0.0f64;
        for &v in values {
            let d = v as f64 - mean;
            m2 += d * d;
            m4 += d * d * d * d;
        }
        m2 /= n;
        m4 /= n;
        let kurtosis = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 };
        Ok(TensorStats {
            mean,
            std: var.sqrt(),
            min,
            max,
            absmax: min.abs().max(max.abs()),
            l2norm: sumsq.sqrt(),
            kurtosis,
            count: values.len(),
        })
    }
}

/// Statistics of a tensor (non-empty by the tensor invariant).
pub fn stats(t: &Tensor) -> TensorResult<TensorStats> {
    TensorStats::compute(t.data())
}

// ─── Sampling ────────────────────────────────────────────────────────────────

/// Source distribution for synthetic tensors.
///
/// `OutlierMixture` draws standard normals and multiplies a `p_out` fraction
/// of elements by `scale_out`, imitating the heavy-tailed channels seen in
/// transformer activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistSpec {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Laplace { loc: f64, scale: f64 },
    OutlierMixture { p_out: f64, scale_out: f64 },
}

impl DistSpec {
    pub fn validate(&self) -> TensorResult<()> {
        match *self {
            DistSpec::Normal { std, .. } if std <= 0.0 || !std.is_finite() => {
                Err(TensorError::InvalidParam { field: "std", value: std })
            }
            DistSpec::Uniform { lo, hi } if !(lo < hi) => {
                Err(TensorError::InvalidParam { field: "lo", value: lo })
            }
            DistSpec::Laplace { scale, .. } if scale <= 0.0 || !scale.is_finite() => {
                Err(TensorError::InvalidParam { field: "scale", value: scale })
            }
            DistSpec::OutlierMixture { p_out, .. } if !(0.0..=1.0).contains(&p_out) => {
                Err(TensorError::InvalidParam { field: "p_out", value: p_out })
            }
            DistSpec::OutlierMixture { scale_out, .. } if scale_out < 1.0 => {
                Err(TensorError::InvalidParam { field: "scale_out", value: scale_out })
            }
            _ => Ok(()),
        }
    }
}

/// Draws a tensor from `dist`. Deterministic given the stream state.
pub fn sample(dist: &DistSpec, shape: Vec<usize>, rng: &mut RngStream) -> TensorResult<Tensor> {
    dist.validate()?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match *dist {
        DistSpec::Normal { mean, std } => {
            for _ in 0..n {
                data.push((mean + std * rng.next_gaussian()) as f32);
            }
        }
        DistSpec::Uniform { lo, hi } => {
            for _ in 0..n {
                data.push(rng.next_range(lo, hi) as f32);
            }
        }
        DistSpec::Laplace { loc, scale } => {
            for _ in 0..n {
                // Inverse CDF on the open interval keeps ln away from 0.
                let u = rng.next_f64_open() - 0.5;
                let x = loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
                data.push(x as f32);
            }
        }
        DistSpec::OutlierMixture { p_out, scale_out } => {
            for _ in 0..n {
                data.push(rng.next_gaussian() as f32);
            }
            for v in &mut data {
                if rng.next_f64() < p_out {
                    *v *= scale_out as f32;
                }
            }
        }
    }
    Tensor::new(data, shape)
}
