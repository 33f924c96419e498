//! Binary snapshot format for verification dumps.
//!
//! Layout: 8-byte magic, little-endian u32 version, little-endian u64
//! header length, JSON header, then the payload blocks the header
//! describes. Indices are little-endian u64, values little-endian f64, so
//! snapshots compare byte for byte across runs.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tensor::{EdgeSet, SparseTensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HOTSNAP1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    k: usize,
    d: usize,
    m: usize,
    label: String,
}

/// Writes a sparse tensor snapshot.
pub fn write_snapshot(path: &Path, label: &str, t: &SparseTensor) -> Result<()> {
    let header = Header {
        n: t.n(),
        k: t.k(),
        d: t.d(),
        m: t.len(),
        label: label.to_string(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for edge in t.edges().iter() {
        for &v in edge {
            f.write_all(&(v as u64).to_le_bytes())?;
        }
    }
    for r in 0..t.len() {
        for &v in t.row(r) {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a snapshot back; fails on magic or version mismatch.
pub fn read_snapshot(path: &Path) -> Result<(String, SparseTensor)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corrupt("snapshot magic mismatch".into()));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != VERSION {
        return Err(Error::Corrupt("snapshot version mismatch".into()));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_buf = vec![0u8; header_len];
    f.read_exact(&mut header_buf)?;
    let header: Header = serde_json::from_slice(&header_buf)?;
    let mut tuples = Vec::with_capacity(header.m);
    for _ in 0..header.m {
        let mut edge = Vec::with_capacity(header.k);
        for _ in 0..header.k {
            f.read_exact(&mut len8)?;
            edge.push(u64::from_le_bytes(len8) as usize);
        }
        tuples.push(edge);
    }
    let edges = EdgeSet::from_tuples(header.n, header.k, &tuples)?;
    if edges.len() != header.m {
        return Err(Error::Corrupt("snapshot edges not sorted unique".into()));
    }
    let mut values = Mat::zeros(header.m, header.d);
    for r in 0..header.m {
        for c in 0..header.d {
            f.read_exact(&mut len8)?;
            values.set(r, c, f64::from_le_bytes(len8));
        }
    }
    Ok((header.label, SparseTensor::from_values(edges, values)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let mut rng = rng_from_seed(5);
        let edges = EdgeSet::from_tuples(4, 2, &[vec![0, 1], vec![3, 2]]).unwrap();
        let t = SparseTensor::random(edges, 3, &mut rng);
        let dir = std::env::temp_dir().join("hot-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("snap.bin");
        write_snapshot(&path, "unit", &t).unwrap();
        let (label, back) = read_snapshot(&path).unwrap();
        assert_eq!(label, "unit");
        assert_eq!(back.max_abs_diff(&t), 0.0);
        let bytes_a = std::fs::read(&path).unwrap();
        write_snapshot(&path, "unit", &t).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
}
