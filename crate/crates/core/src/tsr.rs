//! `.tsr` tensor files.
//!
//! Layout: the magic `TSR1`, four little-endian `u32` dims `(n, c, h, w)`,
//! one dtype byte (`1` = f32, `2` = f64), then the row-major little-endian
//! payload. Nothing follows the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TSR1";
pub const HEADER_LEN: usize = 4 + 4 * 4 + 1;

/// A decoded tensor of either on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested precision (a no-op when it already matches).
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    for d in t.shape().dims() {
        let d = u32::try_from(d).expect("dimension fits in u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected TSR1".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let dtype = DType::from_tag(bytes[20])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[20])))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = shape.numel() * dtype.size();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape} with {dtype:?} needs {expected}",
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, payload)?),
    })
}

fn decode_payload<T: Real>(shape: Shape, payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn write<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}
