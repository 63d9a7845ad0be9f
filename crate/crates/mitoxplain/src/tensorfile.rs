//! Compact binary container for dense float tensors.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"MXT1"
//! dtype  u8      1 = f32, 2 = f64
//! ndim   u8      1..=4
//! dims   ndim x u32
//! data   prod(dims) elements, row-major
//! ```
//!
//! Used for persisted patches (f64) and relevance maps (f32). The decoder
//! rejects oversized or overflowing headers before allocating.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"MXT1";
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;
/// Decoder allocation cap: 1 GiB of payload.
const MAX_BYTES: u64 = 1 << 30;

/// A decoded tensor, either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }
}

pub fn write_f64(array: &ArrayD<f64>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, DTYPE_F64, array.shape())?;
    for v in array.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f32(array: &ArrayD<f32>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, DTYPE_F32, array.shape())?;
    for v in array.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, dtype: u8, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidParameter(format!(
            "tensor rank {} outside 1..=4",
            shape.len()
        )));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidParameter(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    read_from(BufReader::new(file))
}

/// Decode from any reader; safe on untrusted input.
pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Decode("bad tensor magic".to_string()));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let (dtype, ndim) = (head[0], head[1] as usize);
    if !(1..=4).contains(&ndim) {
        return Err(Error::Decode(format!("tensor rank {ndim} outside 1..=4")));
    }
    let elem_size: u64 = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::Decode(format!("unknown dtype tag {other}"))),
    };
    let mut dims = Vec::with_capacity(ndim);
    let mut total: u64 = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let d = u32::from_le_bytes(b) as u64;
        total = total
            .checked_mul(d)
            .ok_or_else(|| Error::Decode("dimension product overflows".to_string()))?;
        dims.push(d as usize);
    }
    let bytes = total
        .checked_mul(elem_size)
        .ok_or_else(|| Error::Decode("payload size overflows".to_string()))?;
    if bytes > MAX_BYTES {
        return Err(Error::Decode(format!("payload of {bytes} bytes exceeds cap")));
    }
    let count = total as usize;
    match dtype {
        DTYPE_F32 => {
            let mut data = vec![0f32; count];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Decode(e.to_string()))?;
            Ok(Tensor::F32(arr))
        }
        DTYPE_F64 => {
            let mut data = vec![0f64; count];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Decode(e.to_string()))?;
            Ok(Tensor::F64(arr))
        }
        _ => unreachable!(),
    }
}
