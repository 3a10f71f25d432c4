//! Little-endian flat dump of a tensor for debugging.
//!
//! Layout: `b"OTTN"`, `u8` element width (4 or 8), `u32` rank, `rank × u64`
//! extents, then the row-major payload.

use std::io::{self, Read, Write};

use super::{Real, Tensor};

const MAGIC: &[u8; 4] = b"OTTN";

pub fn write_tensor<T: Real, W: Write>(t: &Tensor<T>, mut w: W) -> io::Result<()> {
    let width = std::mem::size_of::<T>() as u8;
    w.write_all(MAGIC)?;
    w.write_all(&[width])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        if width == 4 {
            w.write_all(&v.to_f32().unwrap().to_le_bytes())?;
        } else {
            w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensor<T: Real, R: Read>(mut r: R) -> io::Result<Tensor<T>> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a tensor dump"));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let width = b1[0];
    if width != 4 && width != 8 {
        return Err(bad("unsupported element width"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(bad("rank out of range"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("extent overflow"))?;
    // grow as data arrives rather than trusting the header
    let mut data = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let v = if width == 4 {
            r.read_exact(&mut b4)?;
            f32::from_le_bytes(b4) as f64
        } else {
            r.read_exact(&mut b8)?;
            f64::from_le_bytes(b8)
        };
        data.push(T::from_f64(v).unwrap());
    }
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}
