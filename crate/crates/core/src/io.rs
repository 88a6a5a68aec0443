//! `CLTF` tensor files: magic, little-endian `u32` rank and extents, a dtype
//! tag byte, then the raw little-endian values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CLTF";

pub fn encode<R: Real>(tensor: &Tensor<R>) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(9 + 4 * shape.len() + tensor.numel() * R::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &ext in shape {
        out.extend_from_slice(&(ext as u32).to_le_bytes());
    }
    out.push(R::DTYPE.tag());
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decoded file contents, keeping the stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when widening or when the
    /// stored type already matches).
    pub fn into_real<R: Real>(self) -> Tensor<R> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let end = *at + 4;
    let slice = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    *at = end;
    Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CLTF magic".into()));
    }
    let mut at = 4;
    let rank = read_u32(bytes, &mut at)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, &mut at)? as usize);
    }
    let tag = *bytes
        .get(at)
        .ok_or_else(|| Error::Format("missing dtype tag".into()))?;
    at += 1;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let count: usize = shape.iter().product();
    let payload = &bytes[at..];
    if payload.len() != count * dtype.size() {
        return Err(Error::Format(format!(
            "expected {} payload bytes for shape {shape:?}, found {}",
            count * dtype.size(),
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            shape,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            shape,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    })
}

pub fn write_tensor<R: Real>(path: impl AsRef<Path>, tensor: &Tensor<R>) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"CLTF");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], 0);
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 25);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"XXXX").is_err());
        let mut bytes = encode(&Tensor::<f64>::zeros(&[3]));
        bytes.pop();
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&Tensor::<f64>::zeros(&[1]));
        bytes[8] = 7;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn f64_roundtrip_keeps_special_bits() {
        let t = Tensor::<f64>::new(vec![3], vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let back = decode(&encode(&t)).unwrap();
        match back {
            AnyTensor::F64(b) => {
                for (a, b) in t.data().iter().zip(b.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            AnyTensor::F32(_) => panic!("dtype changed"),
        }
    }
}
