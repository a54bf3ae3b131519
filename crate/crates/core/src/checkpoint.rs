//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `NCCKPT01`, a little-endian `u64` header length,
//! a JSON header, then every array as little-endian `f32` in manifest order.
//! Offsets in the manifest are in bytes from the start of the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::DualConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NCCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    precision: String,
    config: DualConfig,
    vocab_hashes: BTreeMap<String, String>,
    meta: BTreeMap<String, serde_json::Value>,
    arrays: Vec<ArrayEntry>,
}

/// Model configuration, vocabulary fingerprints, free-form metadata and
/// parameters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: DualConfig,
    pub vocab_hashes: BTreeMap<String, String>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: DualConfig, params: ParamStore<f32>) -> Self {
        Checkpoint {
            config,
            vocab_hashes: BTreeMap::new(),
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_vocab(mut self, name: &str, fingerprint: String) -> Self {
        self.vocab_hashes.insert(name.to_string(), fingerprint);
        self
    }

    /// Errors when the stored fingerprint for `name` differs from `fingerprint`.
    pub fn check_vocab(&self, name: &str, fingerprint: &str) -> Result<()> {
        match self.vocab_hashes.get(name) {
            Some(h) if h != fingerprint => Err(Error::Checkpoint(format!(
                "{name} vocabulary fingerprint {fingerprint} does not match checkpoint ({h})"
            ))),
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            let len = (t.numel() * 4) as u64;
            arrays.push(ArrayEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            precision: "f32".into(),
            config: self.config.clone(),
            vocab_hashes: self.vocab_hashes.clone(),
            meta: self.meta.clone(),
            arrays,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if hlen > body.len() {
            return Err(bad("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        if header.precision != "f32" {
            return Err(Error::Checkpoint(format!("unsupported precision {}", header.precision)));
        }
        let payload = &body[hlen..];
        let mut expected = 0u64;
        let mut params = ParamStore::new();
        for a in &header.arrays {
            let numel: usize = a.shape.iter().product();
            if a.offset != expected || a.len != numel as u64 * 4 {
                return Err(Error::Checkpoint(format!("manifest entry {} is inconsistent", a.name)));
            }
            let end = (a.offset + a.len) as usize;
            let raw = payload
                .get(a.offset as usize..end)
                .ok_or_else(|| Error::Checkpoint(format!("array {} runs past the payload", a.name)))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = if a.shape.is_empty() {
                Tensor::scalar(data[0])
            } else {
                Tensor::from_vec(a.shape.clone(), data)?
            };
            params.insert(a.name.clone(), t)?;
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(bad("payload size does not match the manifest"));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab_hashes: header.vocab_hashes,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::init_dual;

    fn small() -> DualConfig {
        let mut cfg = DualConfig::desk(20, 10);
        for t in [&mut cfg.text.transformer, &mut cfg.code.transformer] {
            t.d_model = 8;
            t.d_ff = 16;
            t.layers = 1;
            t.heads = 2;
        }
        cfg.text.max_len = 12;
        cfg.text.base_len = 12;
        cfg.text.window = 4;
        cfg.code.max_len = 12;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let params = init_dual::<f32>(&cfg, 5).unwrap();
        let mut ck = Checkpoint::new(cfg, params).with_vocab("text", "abc".into());
        ck.meta.insert("stage".into(), "contrastive".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.params.len(), ck.params.len());
        for ((n1, a), (n2, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.check_vocab("text", "abc").is_ok());
        assert!(back.check_vocab("text", "xyz").is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = small();
        let bytes = Checkpoint::new(cfg.clone(), init_dual::<f32>(&cfg, 1).unwrap()).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
