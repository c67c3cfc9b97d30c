//! Checkpoint files: the resolved run config plus every parameter tensor.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "KHNCKPT\0"
//! format_version   u32
//! config_len       u64      resolved RunConfig as TOML, utf-8
//! config bytes
//! tensor_count     u64
//! per tensor:      name_len u64, name bytes, rank u32, dims u64 x rank,
//!                  byte offset u64 (into the payload)
//! payload_len      u64      bytes
//! payload          f64 little-endian, row-major, enumeration order
//! ```
//!
//! The writer is deterministic, so saving a just-loaded checkpoint
//! reproduces the file byte for byte.

use std::io::Write;
use std::path::Path;

use super::config::RunConfig;
use crate::hypernet::ModelSnapshot;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KHNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, config: &RunConfig, snapshot: &ModelSnapshot) -> Result<()> {
    let config_toml = config.to_toml()?;
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_toml.len() as u64).to_le_bytes());
    out.extend_from_slice(config_toml.as_bytes());

    out.extend_from_slice(&(snapshot.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in snapshot {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (data.len() * 8) as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, _, data) in snapshot {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, ModelSnapshot)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint format version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = cur.u64()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("embedded config is not utf-8: {e}")))?;
    let config = RunConfig::parse(config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;

    let tensor_count = cur.u64()? as usize;
    let mut manifest = Vec::with_capacity(tensor_count);
    let mut expected_offset = 0u64;
    for _ in 0..tensor_count {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let offset = cur.u64()?;
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has offset {offset}, expected {expected_offset}"
            )));
        }
        let numel: usize = shape.iter().product();
        expected_offset += (numel * 8) as u64;
        manifest.push((name, shape, numel));
    }
    let payload_len = cur.u64()?;
    if payload_len != expected_offset {
        return Err(Error::Checkpoint(format!(
            "manifest shapes imply {expected_offset} payload bytes, header says {payload_len}"
        )));
    }
    let payload = cur.take(payload_len as usize)?;
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }

    let mut snapshot: ModelSnapshot = Vec::with_capacity(tensor_count);
    let mut pos = 0usize;
    for (name, shape, numel) in manifest {
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b: [u8; 8] = payload[pos + i * 8..pos + (i + 1) * 8].try_into().unwrap();
            data.push(f64::from_le_bytes(b));
        }
        pos += numel * 8;
        snapshot.push((name, shape, data));
    }
    Ok((config, snapshot))
}
