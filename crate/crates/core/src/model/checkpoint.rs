//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"USEGCKPT" | u32 version | 64-byte hex config fingerprint
//! u64 header_len | header JSON {config, meta}
//! u64 n_values   | n_values x f64 parameters in `ModelParams::buffers` order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"USEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form annotations (training step, selection score, ...).
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: BTreeMap<String, String>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &BTreeMap<String, String>) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: params.config().clone(),
        meta: meta.clone(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n: usize = params.num_params();
    let mut buf = Vec::with_capacity(8 + 4 + 64 + 16 + header.len() + 8 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(params.config().fingerprint().as_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for b in params.buffers() {
        for v in b {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. The stored fingerprint must match the stored config,
/// and, when `expected` is given, that config's fingerprint too.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let fingerprint = String::from_utf8(cur.take(64)?.to_vec())
        .map_err(|_| Error::Checkpoint("fingerprint is not utf-8".into()))?;
    let hlen = cur.u64()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.config.fingerprint() != fingerprint {
        return Err(Error::Checkpoint(
            "stored fingerprint does not match stored config".into(),
        ));
    }
    if let Some(want) = expected {
        if want.fingerprint() != fingerprint {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: checkpoint {fingerprint}, expected {}",
                want.fingerprint()
            )));
        }
    }
    let mut params = ModelParams::zeros(header.config)?;
    let n = cur.u64()? as usize;
    if n != params.num_params() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n} values, model needs {}",
            params.num_params()
        )));
    }
    for buf in params.buffers_mut() {
        for v in buf.iter_mut() {
            *v = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DomainHead;

    fn config() -> ModelConfig {
        ModelConfig::toy(
            vec![DomainHead {
                id: "a".into(),
                labels: vec!["x".into(), "y".into()],
            }],
            4,
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::random(config(), 3).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), "7".to_string());
        save_checkpoint(&path, &p, &meta).unwrap();
        let ck = load_checkpoint(&path, Some(p.config())).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.meta, meta);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::random(config(), 3).unwrap();
        save_checkpoint(&path, &p, &BTreeMap::new()).unwrap();
        let mut other = config();
        other.embed_dim = 8;
        assert!(load_checkpoint(&path, Some(&other)).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::random(config(), 3).unwrap();
        save_checkpoint(&path, &p, &BTreeMap::new()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
