//! Versioned binary tensor container shared by model and reward
//! checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `ATTN`, kind length + kind string, format version (u32), config
//! block length + JSON bytes, tensor count (u32), then per tensor:
//! name length (u32), name, rank (u32), dims (u64 each), f64 data.
//! Save → load → save reproduces the original bytes exactly.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ATTN";

pub fn write_named_tensors(
    path: &Path,
    kind: &str,
    version: u32,
    config_json: &[u8],
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(kind.len() as u32).to_le_bytes())?;
    w.write_all(kind.as_bytes())?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(config_json)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_named_tensors(path: &Path) -> Result<(String, u32, Vec<u8>, Vec<(String, Tensor)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!("bad checkpoint magic {:?}", magic)));
    }
    let kind = read_string(&mut r)?;
    let version = read_u32(&mut r)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut config = vec![0u8; cfg_len];
    r.read_exact(&mut config)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        tensors.push((name, t));
    }
    Ok((kind, version, config, tensors))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Config(format!("bad checkpoint string: {}", e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.25]);
        let b = Tensor::new(vec![], vec![42.0]);
        write_named_tensors(&p, "test", 3, br#"{"x":1}"#, &[("a".into(), &a), ("b".into(), &b)])
            .unwrap();
        let (kind, version, cfg, tensors) = read_named_tensors(&p).unwrap();
        assert_eq!(kind, "test");
        assert_eq!(version, 3);
        assert_eq!(cfg, br#"{"x":1}"#);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].1.data, a.data);
        assert_eq!(tensors[1].1.shape, b.shape);
    }
}
