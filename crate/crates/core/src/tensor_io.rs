//! Little-endian binary tensor files.
//!
//! Layout: magic `A3RT`, version byte (1), dtype byte (0 = f32, 1 = f64),
//! rank byte, `rank` dimensions as u32 LE, then the row-major payload.

use std::path::Path;

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"A3RT";
pub const VERSION: u8 = 1;

pub trait TensorElement: Copy + 'static {
    const DTYPE: u8;
    const NAME: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl TensorElement for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl TensorElement for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";
    const SIZE: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

fn dtype_name(code: u8) -> String {
    match code {
        0 => "f32".into(),
        1 => "f64".into(),
        other => format!("unknown dtype code {other}"),
    }
}

pub fn encode<T, S, D>(array: &ArrayBase<S, D>) -> Vec<u8>
where
    T: TensorElement,
    S: Data<Elem = T>,
    D: Dimension,
{
    let shape = array.shape();
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + T::SIZE * array.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.push(u8::try_from(shape.len()).expect("tensor rank fits in u8"));
    for &d in shape {
        out.extend_from_slice(&u32::try_from(d).expect("dimension fits in u32").to_le_bytes());
    }
    // iter() walks logical (row-major) order regardless of memory layout.
    for &v in array.iter() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: TensorElement>(bytes: &[u8]) -> Result<ArrayD<T>> {
    if bytes.len() < 7 {
        return Err(Error::Truncated {
            expected: 7,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { found });
    }
    if bytes[4] != VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    if bytes[5] != T::DTYPE {
        return Err(Error::DtypeMismatch {
            expected: T::NAME,
            found: dtype_name(bytes[5]),
        });
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * T::SIZE;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Shape(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let data: Vec<T> = bytes[header..]
        .chunks_exact(T::SIZE)
        .map(T::read_le)
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("shape matches payload length"))
}

/// Decodes either float dtype, widening f32 payloads to f64.
pub fn decode_float(bytes: &[u8]) -> Result<ArrayD<f64>> {
    if bytes.len() >= 7 && bytes[..4] == MAGIC && bytes[5] == f32::DTYPE {
        return Ok(decode::<f32>(bytes)?.mapv(f64::from));
    }
    decode::<f64>(bytes)
}

/// Decodes and checks the rank, e.g. `decode_as::<f64, Ix3>`.
pub fn decode_as<T: TensorElement, D: Dimension>(bytes: &[u8]) -> Result<ndarray::Array<T, D>> {
    let arr = decode::<T>(bytes)?;
    let rank = arr.ndim();
    arr.into_dimensionality::<D>().map_err(|_| {
        Error::Shape(format!(
            "expected rank {}, found rank {rank}",
            D::NDIM.map_or("any".to_string(), |n| n.to_string())
        ))
    })
}

pub fn save<T, S, D>(path: &Path, array: &ArrayBase<S, D>) -> Result<()>
where
    T: TensorElement,
    S: Data<Elem = T>,
    D: Dimension,
{
    std::fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

pub fn load<T: TensorElement, D: Dimension>(path: &Path) -> Result<ndarray::Array<T, D>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_as::<T, D>(&bytes)
}
