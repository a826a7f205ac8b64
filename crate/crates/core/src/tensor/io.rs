//! `DSCT` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `DSCT` |
//! | 1     | version (1) |
//! | 1     | dtype code (0 = f32, 1 = f64) |
//! | 1     | rank |
//! | 8·rank| extents, u64 each |
//! | rest  | row-major payload |

use std::fs;
use std::path::Path;

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const TENSOR_MAGIC: [u8; 4] = *b"DSCT";
pub const TENSOR_VERSION: u8 = 1;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + T::DTYPE.width() * t.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(T::DTYPE.code());
    out.push(u8::try_from(t.rank()).expect("rank fits in a byte"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

fn need(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn decode_as<S: Scalar, T: Scalar>(payload: &[u8], shape: Vec<usize>) -> Tensor<T> {
    let w = S::DTYPE.width();
    let data = payload
        .chunks_exact(w)
        .map(|c| {
            let v = S::read_le(c);
            if S::DTYPE == T::DTYPE {
                // same width: reinterpret without a round trip through f64
                T::read_le(c)
            } else {
                T::of(v.as_f64())
            }
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Decodes one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed. The stored dtype is converted to `T`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    need(bytes, 7)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let dtype = DType::from_code(bytes[5]).ok_or(Error::BadDtype(bytes[5]))?;
    let rank = bytes[6] as usize;
    let header = 7 + 8 * rank;
    need(bytes, header)?;
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let at = 7 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
    }
    let total = header + numel(&shape) * dtype.width();
    need(bytes, total)?;
    let payload = &bytes[header..total];
    let t = match dtype {
        DType::F32 => decode_as::<f32, T>(payload, shape),
        DType::F64 => decode_as::<f64, T>(payload, shape),
    };
    Ok((t, total))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    decode_tensor(&bytes).map(|(t, _)| t)
}
