//! Checkpoint serialization: named `f64` tensors in a flat little-endian
//! container.
//!
//! Layout: magic "HTRF" | version u32 | tensor count u32, then per tensor:
//! name length u32, UTF-8 name, rank u32, dims u32[rank], payload f64[].

use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HTRF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensors(w: &mut impl Write, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensors(bytes: &[u8], origin: &str) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: String| Error::Format {
        path: origin.to_string(),
        msg,
    };
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not an HTRF checkpoint".into()));
    }
    let version = read_u32(&mut cur).map_err(|_| bad("truncated version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut cur).map_err(|_| bad("truncated tensor count".into()))?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let more = |what: &str| bad(format!("tensor {i}: truncated {what}"));
        let name_len = read_u32(&mut cur).map_err(|_| more("name length"))? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| more("name"))?;
        let name = String::from_utf8(name).map_err(|_| bad(format!("tensor {i}: name is not UTF-8")))?;
        let rank = read_u32(&mut cur).map_err(|_| more("rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut cur).map_err(|_| more("dims"))? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            cur.read_exact(&mut b).map_err(|_| more("payload"))?;
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::from_vec(&dims, data)
            .map_err(|e| bad(format!("tensor {name:?}: {e}")))?;
        out.push((name, tensor));
    }
    if cur.position() != bytes.len() as u64 {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    read_tensors(&bytes, &path.display().to_string())
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
