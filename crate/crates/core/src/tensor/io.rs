//! QTNS tensor container.
//!
//! Little-endian layout: magic `QTNS`, u32 version (1), u8 dtype (0 =
//! float32), u8 ndim (1..=8), u16 reserved (0), `ndim` u64 extents, then the
//! row-major float32 payload. No padding, no compression; write∘read is
//! bit-exact.

use super::{Tensor, TensorError, TensorResult};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub(crate) const QTNS_MAGIC: [u8; 4] = *b"QTNS";
pub(crate) const QTNS_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub(crate) fn read_exact<const N: usize>(r: &mut impl Read) -> TensorResult<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_u16(r: &mut impl Read) -> TensorResult<u16> {
    Ok(u16::from_le_bytes(read_exact::<2>(r)?))
}

pub(crate) fn read_u32(r: &mut impl Read) -> TensorResult<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

pub(crate) fn read_u64(r: &mut impl Read) -> TensorResult<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

pub(crate) fn read_f32(r: &mut impl Read) -> TensorResult<f32> {
    Ok(f32::from_le_bytes(read_exact::<4>(r)?))
}

pub(crate) fn write_shape(w: &mut impl Write, shape: &[usize]) -> TensorResult<()> {
    w.write_all(&[DTYPE_F32, shape.len() as u8])?;
    w.write_all(&0u16.to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_shape(r: &mut impl Read) -> TensorResult<Vec<usize>> {
    let [dtype, ndim] = read_exact::<2>(r)?;
    if dtype != DTYPE_F32 {
        return Err(TensorError::UnsupportedDtype { found: dtype });
    }
    if !(1..=8).contains(&ndim) {
        return Err(TensorError::BadHeader("ndim out of 1..=8"));
    }
    if read_u16(r)? != 0 {
        return Err(TensorError::BadHeader("reserved field nonzero"));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let extent = read_u64(r)?;
        if extent == 0 {
            return Err(TensorError::BadHeader("zero extent"));
        }
        shape.push(extent as usize);
    }
    Ok(shape)
}

/// Writes `t` to `path` in QTNS format.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> TensorResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&QTNS_MAGIC)?;
    w.write_all(&QTNS_VERSION.to_le_bytes())?;
    write_shape(&mut w, t.shape())?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a QTNS file back into a tensor, validating header and payload.
pub fn read_tensor(path: impl AsRef<Path>) -> TensorResult<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact::<4>(&mut r)?;
    if magic != QTNS_MAGIC {
        return Err(TensorError::BadMagic { found: magic });
    }
    let version = read_u32(&mut r)?;
    if version != QTNS_VERSION {
        return Err(TensorError::UnsupportedVersion { found: version });
    }
    let shape = read_shape(&mut r)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = read_f32(&mut r)?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        data.push(v);
    }
    Tensor::new(data, shape)
}
