//! Checkpoint archive: named f64 tensors plus a JSON manifest.
//!
//! Single-file binary format, everything little-endian:
//!
//! ```text
//! magic "MCFW0001"
//! u64: manifest byte length, then that many bytes of UTF-8 JSON
//! u64: entry count
//! per entry: u64 name length, name bytes,
//!            u64 rank, u64 dims...,
//!            f64 payload (row-major)
//! ```
//!
//! Entries are written in sorted name order, so identical stores produce
//! identical bytes. Payloads are raw IEEE-754 bits: a round trip restores
//! every parameter exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::params::ParamStore;
use crate::gradcore::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MCFW0001";
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;

pub fn save(path: &Path, manifest: &serde_json::Value, tensors: &ParamStore) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let manifest_bytes = serde_json::to_vec(manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, tensor) in tensors.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Validation(format!(
            "not a checkpoint file: bad magic {:?}",
            &magic
        )));
    }
    let manifest_len = read_u64(&mut r)?;
    let mut manifest_bytes = vec![0u8; manifest_len as usize];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: serde_json::Value = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Validation(format!("checkpoint manifest is not valid JSON: {e}")))?;
    let count = read_u64(&mut r)?;
    let mut tensors = ParamStore::new();
    for i in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Validation(format!(
                "checkpoint entry {i}: name length {name_len} exceeds limit"
            )));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Validation(format!("checkpoint entry {i}: name is not UTF-8")))?;
        let rank = read_u64(&mut r)?;
        if rank > MAX_RANK {
            return Err(Error::Validation(format!(
                "checkpoint entry '{name}': rank {rank} exceeds limit"
            )));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > (1 << 32) {
            return Err(Error::Validation(format!(
                "checkpoint entry '{name}': implausible element count {numel}"
            )));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok((manifest, tensors))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
