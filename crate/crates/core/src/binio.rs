//! Little-endian binary containers: plain f32 matrices and named-tensor bundles.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"BIMAMAT1";
pub const TENSORS_MAGIC: &[u8; 8] = b"BIMATNS1";

pub fn write_matrix<W: Write>(w: &mut W, m: &Array2<f32>) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Array2<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Format("not a matrix file (bad magic)".into()));
    }
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Array2<f32>> {
    read_matrix(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoredDType {
    F32,
    F64,
}

impl StoredDType {
    fn code(self) -> u8 {
        match self {
            StoredDType::F32 => 0,
            StoredDType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(StoredDType::F32),
            1 => Ok(StoredDType::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StoredDType::F32 => "f32",
            StoredDType::F64 => "f64",
        }
    }
}

/// One entry of a tensor bundle; values are kept as f64 in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: StoredDType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Layout: magic, u32 count, then per tensor: u32 name length, name,
/// u8 dtype, u32 rank, u64 dims, little-endian payload.
pub fn write_tensors<W: Write>(w: &mut W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(TENSORS_MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.values.len()
            )));
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&[t.dtype.code()])?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        match t.dtype {
            StoredDType::F32 => {
                for v in &t.values {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            StoredDType::F64 => {
                for v in &t.values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSORS_MAGIC {
        return Err(Error::Format("not a tensor bundle (bad magic)".into()));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype = StoredDType::from_code(code[0])?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let values = match dtype {
            StoredDType::F32 => {
                let mut buf = vec![0u8; numel * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            StoredDType::F64 => {
                let mut buf = vec![0u8; numel * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        };
        out.push(NamedTensor {
            name,
            dtype,
            shape,
            values,
        });
    }
    Ok(out)
}
