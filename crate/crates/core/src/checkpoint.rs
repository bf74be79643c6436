//! Binary checkpoints with a JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MOES" | version u32 | count u32 | count × tensor
//! tensor = name_len u32 | name (UTF-8) | rank u8 | rank × dim u64 | values f64…
//! ```
//!
//! The sidecar `<checkpoint>.json` holds the model config, provenance and
//! the vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::corpus::{Example, Vocabulary};
use crate::error::{Error, Result};
use crate::model::TransformerParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MOES";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// `init`, `mixed` or `finetune`.
    pub regime: String,
    /// SHA-256 per training corpus, in dataset order.
    #[serde(default)]
    pub corpus_hashes: Vec<String>,
    /// Digest of the checkpoint this one was derived from.
    #[serde(default)]
    pub parent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub config: ModelConfig,
    pub provenance: Provenance,
    #[serde(default)]
    pub vocab: Option<Vocabulary>,
    /// SHA-256 over every tensor's name, shape and bits.
    pub params_digest: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Hash of a corpus' token ids and dataset tags.
pub fn corpus_digest(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update((e.dataset_id as u64).to_le_bytes());
        for seq in [&e.source_ids, &e.target_ids] {
            h.update((seq.len() as u64).to_le_bytes());
            for &t in seq.iter() {
                h.update((t as u64).to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

pub fn to_bytes(params: &TransformerParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.total_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (info, t) in params.info.iter().zip(&params.tensors) {
        out.extend_from_slice(&(info.name.len() as u32).to_le_bytes());
        out.extend_from_slice(info.name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses the binary body into named tensors, in file order.
pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has an implausible shape {shape:?}")))?;
        let bytes = r.take(n * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape.clone(), data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &TransformerParams, provenance: Provenance, vocab: Option<&Vocabulary>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        provenance,
        vocab: vocab.cloned(),
        params_digest: params.digest(|_| true),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Loads a checkpoint and checks every tensor against the sidecar config.
pub fn load(path: &Path) -> Result<(TransformerParams, Sidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let named: HashMap<String, Tensor> = from_bytes(&bytes)?.into_iter().collect();
    let mut params = TransformerParams::init(&sidecar.config, 0)?;
    params.load_named(named)?;
    if params.digest(|_| true) != sidecar.params_digest {
        return Err(Error::Checkpoint("tensor digest does not match the sidecar".into()));
    }
    Ok((params, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_hidden_main: 8,
            d_hidden_deputy: 4,
            n_deputies: 2,
            n_datasets: 2,
            max_src_len: 6,
            max_tgt_len: 4,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.moes");
        let mut p = TransformerParams::init(&tiny(), 3).unwrap();
        p.tensors[0].data_mut()[0] = -0.0;
        p.tensors[0].data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let prov = Provenance {
            seed: 3,
            regime: "init".into(),
            ..Default::default()
        };
        save(&path, &p, prov.clone(), None).unwrap();
        let (q, side) = load(&path).unwrap();
        assert_eq!(side.config, p.config);
        assert_eq!(side.provenance, prov);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            assert!(a.bitwise_eq(b));
        }
        assert_eq!(to_bytes(&p), fs::read(&path).unwrap());
    }

    #[test]
    fn header_layout() {
        let p = TransformerParams::init(&tiny(), 0).unwrap();
        let b = to_bytes(&p);
        assert_eq!(&b[..4], b"MOES");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize, p.len());
        let name_len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        assert_eq!(&b[16..16 + name_len], b"embed.tokens");
        assert_eq!(b[16 + name_len], 2);
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.moes");
        let p = TransformerParams::init(&tiny(), 0).unwrap();
        save(&path, &p, Provenance::default(), None).unwrap();
        // sidecar claims a wider model
        let side = sidecar_path(&path);
        let mut sc: Sidecar = serde_json::from_str(&fs::read_to_string(&side).unwrap()).unwrap();
        sc.config.d_hidden_deputy = 6;
        fs::write(&side, serde_json::to_string(&sc).unwrap()).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));

        let b = to_bytes(&p);
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
