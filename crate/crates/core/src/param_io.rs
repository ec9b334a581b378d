//! Flat binary parameter files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "LMEC"            4 bytes magic
//! version           u32
//! tensor count      u32
//! shape table       count × (rows u32, cols u32)
//! data              Σ rows·cols × f64, tensors in declaration order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::blocks::{BlockParams, Encoder};
use crate::error::{LmecError, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"LMEC";
pub const FORMAT_VERSION: u32 = 1;

/// Anything that owns an ordered list of learnable tensors.
pub trait ParameterSet {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
}

impl ParameterSet for BlockParams {
    fn tensors(&self) -> Vec<&Matrix> {
        BlockParams::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        BlockParams::tensors_mut(self)
    }
}

impl ParameterSet for Encoder {
    fn tensors(&self) -> Vec<&Matrix> {
        Encoder::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        Encoder::tensors_mut(self)
    }
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| LmecError::Format(format!("dimension {v} does not fit in u32")))
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[&Matrix]) -> Result<()> {
    let io = |e| LmecError::io("<writer>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&dim_u32(tensors.len())?.to_le_bytes()).map_err(io)?;
    for t in tensors {
        w.write_all(&dim_u32(t.rows())?.to_le_bytes()).map_err(io)?;
        w.write_all(&dim_u32(t.cols())?.to_le_bytes()).map_err(io)?;
    }
    for t in tensors {
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| LmecError::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Matrix>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| LmecError::Format(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(LmecError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(LmecError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let shapes = (0..count)
        .map(|_| Ok((read_u32(&mut r)? as usize, read_u32(&mut r)? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for (i, (rows, cols)) in shapes.into_iter().enumerate() {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)
                .map_err(|e| LmecError::Format(format!("tensor {i} truncated: {e}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push(Matrix::new(rows, cols, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| LmecError::Format(e.to_string()))?;
    if !rest.is_empty() {
        return Err(LmecError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, params: &impl ParameterSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| LmecError::io(path, e))?;
    write_tensors(BufWriter::new(file), &params.tensors()).map_err(|e| match e {
        LmecError::Io { source, .. } => LmecError::io(path, source),
        other => other,
    })
}

/// Overwrites every tensor of `params` with the file's contents. The file's
/// shape table must match `params` exactly.
pub fn load_into(path: impl AsRef<Path>, params: &mut impl ParameterSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| LmecError::io(path, e))?;
    let loaded = read_tensors(BufReader::new(file))?;
    let mut targets = params.tensors_mut();
    if loaded.len() != targets.len() {
        return Err(LmecError::Format(format!(
            "file has {} tensors, parameters have {}",
            loaded.len(),
            targets.len()
        )));
    }
    for (i, (dst, src)) in targets.iter().zip(&loaded).enumerate() {
        if dst.shape() != src.shape() {
            return Err(LmecError::Format(format!(
                "tensor {i} has shape {:?} in file, {:?} in parameters",
                src.shape(),
                dst.shape()
            )));
        }
    }
    for (dst, src) in targets.iter_mut().zip(loaded) {
        **dst = src;
    }
    Ok(())
}
