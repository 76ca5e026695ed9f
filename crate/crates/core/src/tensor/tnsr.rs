//! `TNSR` binary tensor files: magic `TNSR1\n`, u32 rank, `rank` u64 dims,
//! then the little-endian fp64 payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"TNSR1\n";

/// Upper bound on rank and element count accepted when decoding, so a
/// corrupt header cannot trigger a huge allocation.
const MAX_RANK: u32 = 16;
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn encoded_len(t: &Tensor) -> usize {
    MAGIC.len() + 4 + 8 * t.rank() + 8 * t.len()
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(t));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed. Errors carry a plain message; callers attach the path.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format!("truncated: needed {n} bytes at offset {pos}"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(MAGIC.len())? != MAGIC {
        return Err("bad magic".into());
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if rank == 0 || rank > MAX_RANK {
        return Err(format!("unsupported rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
        if d == 0 {
            return Err("zero extent in dims".into());
        }
        count = count
            .checked_mul(d)
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| "element count too large".to_string())?;
        shape.push(d as usize);
    }
    let payload = take(8 * count as usize)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::from_parts(shape, data), pos))
}

pub fn write<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn read<R: Read>(mut r: R) -> std::result::Result<Tensor, String> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - used));
    }
    Ok(t)
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read(f).map_err(|msg| Error::format(path, msg))
}
