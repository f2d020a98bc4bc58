//! Binary checkpoint format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "KDSEGCK\0"
//! version  u32
//! seed     u64
//! meta     u32 length + JSON (NetworkConfig plus free-form run metadata)
//! count    u32 number of parameter tensors
//! tensors  per tensor: u32 name length + name, u32 rank + u64 dims, f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KDSEGCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub seed: u64,
    pub config: NetworkConfig,
    /// Caller-supplied provenance (stage, epoch, validation loss...).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn save_checkpoint(net: &Network, path: &Path, extra: serde_json::Map<String, serde_json::Value>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&net.seed().to_le_bytes())?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        seed: net.seed(),
        config: net.config().clone(),
        extra,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Config(e.to_string()))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(net.params().len() as u32).to_le_bytes())?;
    for p in net.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &p.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Loads a checkpoint, rebuilding the network from its embedded config.
pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Compatibility(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let seed = r.u64()?;
    let len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(&r.bytes(len)?).map_err(|e| Error::Compatibility(e.to_string()))?;
    let mut net = Network::build(meta.config.clone(), seed)?;
    let count = r.u32()? as usize;
    if count != net.params().len() {
        return Err(Error::Compatibility(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            net.params().len()
        )));
    }
    for p in net.params_mut() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|e| Error::Compatibility(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.shape {
            return Err(Error::Compatibility(format!(
                "tensor {name} {shape:?} does not match {} {:?}",
                p.name, p.shape
            )));
        }
        let raw = r.bytes(4 * p.value.len())?;
        for (v, chunk) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok((net, meta))
}

/// Loads a checkpoint that must match `expected` exactly.
pub fn load_checkpoint_for(path: &Path, expected: &NetworkConfig) -> Result<(Network, CheckpointMeta)> {
    let (net, meta) = load_checkpoint(path)?;
    if net.config() != expected {
        let got = net.config();
        let detail = if got.in_channels != expected.in_channels {
            format!(
                "checkpoint has {} input channels, expected {}",
                got.in_channels, expected.in_channels
            )
        } else {
            format!("checkpoint config {got:?} differs from expected {expected:?}")
        };
        return Err(Error::Compatibility(detail));
    }
    Ok((net, meta))
}
