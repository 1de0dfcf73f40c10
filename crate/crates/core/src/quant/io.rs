//! QTNQ container for quantized tensors.
//!
//! Little-endian layout: magic `QTNQ`, u32 version (1), u8 bits, u8 scale
//! policy code (0 absmax / 1 minmax / 2 fixed), u8 granularity code
//! (0 per-tensor / 1 per-channel + u64 axis / 2 per-group + u64 axis +
//! u64 group size), u8 transform code (0 identity / 1 signed power), f64
//! exponent, u64 group count, per group an f32 scale and u16 zero-point, the
//! QTNS shape header, then one u8 code per element. A fixed policy's α is
//! not stored separately: it is recovered as scale · 2^(b−1).

use super::{
    Granularity, QuantError, QuantResult, QuantScheme, QuantizedTensor, ScalePolicy, Transform,
};
use crate::tensor::TensorError;
use crate::tensor::io_helpers::{
    read_exact, read_f32, read_shape, read_u16, read_u32, read_u64, write_shape,
};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const QTNQ_MAGIC: [u8; 4] = *b"QTNQ";
const QTNQ_VERSION: u32 = 1;

/// Writes `q` to `path` in QTNQ format.
pub fn write_quantized(path: impl AsRef<Path>, q: &QuantizedTensor) -> QuantResult<()> {
    let mut w = BufWriter::new(File::create(path).map_err(TensorError::from)?);
    let io = |e: std::io::Error| QuantError::Tensor(TensorError::from(e));
    w.write_all(&QTNQ_MAGIC).map_err(io)?;
    w.write_all(&QTNQ_VERSION.to_le_bytes()).map_err(io)?;
    let scheme = q.scheme();
    let policy_code = match scheme.scale_policy {
        ScalePolicy::AbsmaxSymmetric => 0u8,
        ScalePolicy::MinMaxAsymmetric => 1,
        ScalePolicy::Fixed { .. } => 2,
    };
    w.write_all(&[scheme.bits, policy_code]).map_err(io)?;
    match scheme.granularity {
        Granularity::PerTensor => w.write_all(&[0u8]).map_err(io)?,
        Granularity::PerChannel { axis } => {
            w.write_all(&[1u8]).map_err(io)?;
            w.write_all(&(axis as u64).to_le_bytes()).map_err(io)?;
        }
        Granularity::PerGroup { axis, group_size } => {
            w.write_all(&[2u8]).map_err(io)?;
            w.write_all(&(axis as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&(group_size as u64).to_le_bytes()).map_err(io)?;
        }
    }
    let (tf_code, exponent) = match scheme.transform {
        Transform::Identity => (0u8, 1.0f64),
        Transform::SignedPower { exponent } => (1, exponent),
    };
    w.write_all(&[tf_code]).map_err(io)?;
    w.write_all(&exponent.to_le_bytes()).map_err(io)?;
    w.write_all(&(q.group_count() as u64).to_le_bytes()).map_err(io)?;
    for (&s, &z) in q.scales().iter().zip(q.zero_points()) {
        w.write_all(&s.to_le_bytes()).map_err(io)?;
        w.write_all(&z.to_le_bytes()).map_err(io)?;
    }
    write_shape(&mut w, q.shape())?;
    w.write_all(q.codes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a QTNQ file, validating codes, scales, and group structure.
pub fn read_quantized(path: impl AsRef<Path>) -> QuantResult<QuantizedTensor> {
    let mut r = BufReader::new(File::open(path).map_err(TensorError::from)?);
    let magic = read_exact::<4>(&mut r)?;
    if magic != QTNQ_MAGIC {
        return Err(TensorError::BadMagic { found: magic }.into());
    }
    let version = read_u32(&mut r)?;
    if version != QTNQ_VERSION {
        return Err(TensorError::UnsupportedVersion { found: version }.into());
    }
    let [bits, policy_code] = read_exact::<2>(&mut r)?;
    let [gran_code] = read_exact::<1>(&mut r)?;
    let granularity = match gran_code {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel { axis: read_u64(&mut r)? as usize },
        2 => Granularity::PerGroup {
            axis: read_u64(&mut r)? as usize,
            group_size: read_u64(&mut r)? as usize,
        },
        _ => return Err(TensorError::BadHeader("unknown granularity code").into()),
    };
    let [tf_code] = read_exact::<1>(&mut r)?;
    let exponent = f64::from_le_bytes(read_exact::<8>(&mut r)?);
    let transform = match tf_code {
        0 => Transform::Identity,
        1 => Transform::SignedPower { exponent },
        _ => return Err(TensorError::BadHeader("unknown transform code").into()),
    };
    let group_count = read_u64(&mut r)? as usize;
    let mut scales = Vec::with_capacity(group_count);
    let mut zero_points = Vec::with_capacity(group_count);
    for _ in 0..group_count {
        scales.push(read_f32(&mut r)?);
        zero_points.push(read_u16(&mut r)?);
    }
    let shape = read_shape(&mut r)?;
    let n: usize = shape.iter().product();
    let mut codes = vec![0u8; n];
    r.read_exact(&mut codes).map_err(TensorError::from)?;
    let scale_policy = match policy_code {
        0 => ScalePolicy::AbsmaxSymmetric,
        1 => ScalePolicy::MinMaxAsymmetric,
        2 => {
            if !(2..=8).contains(&bits) {
                return Err(QuantError::InvalidBits { bits });
            }
            let alpha = scales.first().copied().unwrap_or(1.0) * (1u32 << (bits - 1)) as f32;
            ScalePolicy::Fixed { alpha }
        }
        _ => return Err(TensorError::BadHeader("unknown scale policy code").into()),
    };
    let scheme = QuantScheme { bits, scale_policy, granularity, transform };
    QuantizedTensor::from_parts(codes, scales, zero_points, scheme, shape)
}
