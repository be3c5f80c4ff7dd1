//! Versioned binary checkpoints.
//!
//! ```text
//! "MCDSEG1"                      7-byte magic
//! u32  format version            little-endian, currently 1
//! u32  config length, then the UNet config as JSON
//! u64  parameter count, then parameters in registry order (f64 LE)
//! u64  running-stat count, then per batch-norm layer: means, variances (f64 LE)
//! u64  FNV-1a 64 checksum of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::unet::{build_unet, ModelGraph, UNetConfig};

pub const MAGIC: &[u8; 7] = b"MCDSEG1";
pub const FORMAT_VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn encode(model: &ModelGraph) -> Result<Vec<u8>> {
    let config =
        serde_json::to_vec(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = model.params();
    let running = model.running_state();
    let count: usize = params.iter().map(|t| t.len()).sum();

    let mut out = Vec::with_capacity(64 + config.len() + 8 * (count + running.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for t in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(running.len() as u64).to_le_bytes());
    for v in &running {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: u64) -> Result<Vec<f64>> {
        let n = usize::try_from(n).map_err(|_| Error::Checkpoint("count overflows".into()))?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("count overflows".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing MCDSEG1 magic".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a64(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: payload,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let config: UNetConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
    let count = r.u64()?;
    let params = r.f64s(count)?;
    let rcount = r.u64()?;
    let running = r.f64s(rcount)?;
    if r.pos != payload.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after running statistics".into(),
        ));
    }
    let mut model = build_unet(&config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    model.load_state(&params, &running)?;
    Ok(model)
}

/// Checksum stored in the trailer of an encoded checkpoint.
pub fn checksum(model: &ModelGraph) -> Result<u64> {
    let bytes = encode(model)?;
    Ok(u64::from_le_bytes(
        bytes[bytes.len() - 8..].try_into().expect("8 bytes"),
    ))
}

pub fn save(model: &ModelGraph, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelGraph> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
