//! `STF1` binary tensor container.
//!
//! Layout: magic `STF1`, little-endian `u32` rank, `rank` little-endian `u64`
//! dims, then the row-major payload as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STF1";

const MAX_RANK: u32 = 16;

pub fn write<W: Write>(mut w: W, tensor: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::format(format!("truncated STF stream while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad STF magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "rank")?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(Error::format(format!("STF rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(&mut r, &mut b8, "dims")?;
        let d = usize::try_from(u64::from_le_bytes(b8))
            .map_err(|_| Error::format("STF dim does not fit in usize"))?;
        count = count
            .checked_mul(d)
            .filter(|&c| c <= (1 << 32))
            .ok_or_else(|| Error::format("STF element count too large"))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut r, &mut b8, "payload")?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

/// Reads one tensor; trailing bytes after the payload are a format error.
pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let t = read(&mut r).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format(format!("{}: trailing bytes after STF payload", path.display())));
    }
    Ok(t)
}
