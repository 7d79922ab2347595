//! Dense tensor helpers and the on-disk tensor format.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! u64 rank | rank x u64 dims | prod(dims) x f64 values (row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

/// Refuse headers that would allocate absurd buffers from a corrupt file.
const MAX_RANK: u64 = 8;
const MAX_ELEMS: u64 = 1 << 32;

pub fn to_tensor(a: &Array2<f64>) -> Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), &Device::Cpu)?)
}

pub fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let data = t.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((r, c), data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_tensor<W: Write>(w: &mut W, dims: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} hold {n} values, got {}",
            data.len()
        )));
    }
    w.write_all(&(dims.len() as u64).to_le_bytes())?;
    for d in dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::CorruptTensor(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(Error::CorruptTensor(format!("rank {rank} too large")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut n: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        n = n
            .checked_mul(d)
            .filter(|n| *n <= MAX_ELEMS)
            .ok_or_else(|| Error::CorruptTensor("element count overflow".into()))?;
        dims.push(d as usize);
    }
    let mut bytes = vec![0u8; n as usize * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::CorruptTensor(format!("truncated payload: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn save_array2(path: &Path, a: &Array2<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (r, c) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    write_tensor(&mut f, &[r, c], &data)?;
    f.flush()?;
    Ok(())
}

pub fn load_array2(path: &Path) -> Result<Array2<f64>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, data) = read_tensor(&mut f)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::CorruptTensor(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    if dims.len() != 2 {
        return Err(Error::CorruptTensor(format!(
            "expected a matrix, got rank {}",
            dims.len()
        )));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data).map_err(|e| Error::CorruptTensor(e.to_string()))
}
