//! Flat binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "GPPARAMS"
//! version u32      1
//! count   u32
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   ndim u32, dims u64 x ndim
//!   values f64 x product(dims)
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"GPPARAMS";
pub const VERSION: u32 = 1;

pub fn write_parameters<T: Scalar, W: Write>(
    mut w: W,
    params: &[(&str, &Tensor<T>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_parameters<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name not UTF-8".into()))?;
        let ndim = read_u32(&mut r)?;
        let dims = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Format(format!("{name}: unsupported rank {ndim}"))),
        };
        let mut values = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            values.push(T::of(f64::from_le_bytes(buf)));
        }
        out.push((name, Tensor::from_vec(rows, cols, values)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
