//! Raw array dump.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 7            | magic `T4TARR1`                  |
//! | 1            | dtype code (1 = f32, 2 = f64)    |
//! | 4            | rank `r` (u32)                   |
//! | 8·r          | extents (u64 each)               |
//! | size·∏extents| row-major element data           |

use std::io::{Read, Write};

use super::{numel, DType, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 7] = b"T4TARR1";

/// An array read back from a dump with its element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyArray {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyArray::F32(t) => t.shape(),
            AnyArray::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyArray::F32(t) => t.cast(),
            AnyArray::F64(t) => t.clone(),
        }
    }
}

pub fn write_array<T: Element, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + t.len() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE.code());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf).map_err(|e| Error::io("writing array", e))
}

pub fn read_array<R: Read>(mut r: R) -> Result<AnyArray> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading array", e))?;
    parse(&bytes)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    if bytes.len() < *at + n {
        return Err(Error::Truncated {
            expected: *at + n,
            actual: bytes.len(),
        });
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

fn parse(bytes: &[u8]) -> Result<AnyArray> {
    let mut at = 0;
    if take(bytes, &mut at, 7)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, expected T4TARR1".into(),
        });
    }
    let code = take(bytes, &mut at, 1)?[0];
    let dtype = DType::from_code(code).ok_or(Error::Parse {
        offset: 7,
        msg: format!("unknown dtype code {code}"),
    })?;
    let rank = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let off = at;
        let e = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| Error::Parse {
            offset: off,
            msg: format!("extent {e} too large"),
        })?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or(Error::Parse {
            offset: 12,
            msg: "element count overflows".into(),
        })?;
    let payload = take(bytes, &mut at, n * dtype.size())?;
    if at != bytes.len() {
        return Err(Error::Parse {
            offset: at,
            msg: format!("{} trailing bytes", bytes.len() - at),
        });
    }
    debug_assert_eq!(numel(&shape), n);
    Ok(match dtype {
        DType::F32 => AnyArray::F32(decode(shape, payload)?),
        DType::F64 => AnyArray::F64(decode(shape, payload)?),
    })
}

fn decode<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    Tensor::from_vec(shape, payload.chunks_exact(size).map(T::read_le).collect())
}
