//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then every tensor's values as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MVODCKP1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Param,
    Velocity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    kind: Kind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: PipelineConfig,
    /// Completed epochs.
    epoch: usize,
    /// Completed optimizer steps.
    iteration: usize,
    tensors: Vec<Entry>,
}

/// Everything needed to resume training or run evaluation.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub epoch: usize,
    pub iteration: usize,
    pub params: ParamStore,
    /// Momentum buffers keyed like `params`; empty if not saved.
    pub velocity: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut body: Vec<u8> = Vec::new();
        for (kind, store) in [(Kind::Param, &self.params), (Kind::Velocity, &self.velocity)] {
            for (name, t) in store.iter() {
                tensors.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), kind: kind.clone() });
                for v in t.data() {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header { config: self.config.clone(), epoch: self.epoch, iteration: self.iteration, tensors };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        let mut params = ParamStore::new();
        let mut velocity = ParamStore::new();
        let mut pos = hend;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + n * 8;
            if end > bytes.len() {
                return Err(bad(&format!("truncated data for {}", e.name)));
            }
            let data = bytes[pos..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            pos = end;
            let t = Tensor::new(&e.shape, data);
            match e.kind {
                Kind::Param => params.insert(e.name, t),
                Kind::Velocity => velocity.insert(e.name, t),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        header.config.validate()?;
        Ok(Self { config: header.config, epoch: header.epoch, iteration: header.iteration, params, velocity })
    }

    /// Written to a temporary sibling first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The stored parameters must be exactly the set the configured variant expects.
    pub fn check_compatible(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in expected.iter() {
            match self.params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::new(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25e-300]));
        params.insert("b", Tensor::scalar(7.0));
        let mut velocity = ParamStore::new();
        velocity.insert("a.weight", Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]));
        Checkpoint { config: PipelineConfig::default(), epoch: 3, iteration: 120, params, velocity }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.iteration, 120);
        assert_eq!(back.config, c.config);
        for (n, t) in c.params.iter() {
            assert_eq!(back.params.get(n).unwrap(), t);
        }
        assert_eq!(back.velocity.get("a.weight"), c.velocity.get("a.weight"));
        assert!(back.velocity.get("b").is_none());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(b"TMVOD000").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn compatibility_check() {
        let c = sample();
        let mut expected = ParamStore::new();
        expected.insert("a.weight", Tensor::zeros(&[2, 2]));
        expected.insert("b", Tensor::zeros(&[]));
        assert!(c.check_compatible(&expected).is_ok());
        expected.insert("c", Tensor::zeros(&[1]));
        assert!(c.check_compatible(&expected).is_err());
        let mut other = ParamStore::new();
        other.insert("a.weight", Tensor::zeros(&[4]));
        other.insert("b", Tensor::zeros(&[]));
        assert!(c.check_compatible(&other).is_err());
    }
}
