//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VSCK" | u32 version | str config_hash | u32 n_blocks | block* | [u8; 32] sha256
//! block  = str name | u32 n_meta | (str key, str value)* | u32 n_tensors | tensor*
//! tensor = str name | u32 ndim | u64 dim* | f32 value*
//! str    = u32 byte_len | utf-8 bytes
//! ```
//!
//! The trailing digest covers every preceding byte, so truncated or
//! partially written files are detected on load.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor};
use crate::util::sha256;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Block {
    pub meta: IndexMap<String, String>,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl Block {
    pub fn with_params(params: &ParamSet<f32>) -> Self {
        Block {
            meta: IndexMap::new(),
            tensors: params.iter().map(|(k, t)| (k.clone(), t.clone())).collect(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Missing(format!("checkpoint metadata {key:?}")))
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint metadata {key:?} has an unexpected value")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Missing(format!("checkpoint tensor {name:?}")))
    }

    /// Every tensor as a parameter set (insertion order preserved).
    pub fn params(&self, seed: u64) -> ParamSet<f32> {
        let mut p = ParamSet::new(seed);
        for (k, t) in &self.tensors {
            p.insert(k, t.clone());
        }
        p
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub blocks: IndexMap<String, Block>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err("unexpected end of data".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            blocks: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, block: Block) {
        self.blocks.insert(name.to_string(), block);
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Missing(format!("checkpoint block {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, b) in &self.blocks {
            put_str(&mut out, name);
            out.extend_from_slice(&(b.meta.len() as u32).to_le_bytes());
            for (k, v) in &b.meta {
                put_str(&mut out, k);
                put_str(&mut out, v);
            }
            out.extend_from_slice(&(b.tensors.len() as u32).to_le_bytes());
            for (k, t) in &b.tensors {
                put_str(&mut out, k);
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = sha256(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic or too short)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if sha256(body) != digest {
            return Err(corrupt("digest mismatch (truncated or partially written)".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let parse = |r: &mut Reader| -> std::result::Result<Checkpoint, String> {
            let mut ck = Checkpoint::new(r.str()?);
            for _ in 0..r.u32()? {
                let name = r.str()?;
                let mut b = Block::default();
                for _ in 0..r.u32()? {
                    let k = r.str()?;
                    b.meta.insert(k, r.str()?);
                }
                for _ in 0..r.u32()? {
                    let k = r.str()?;
                    let nd = r.u32()? as usize;
                    let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
                    let n: usize = shape.iter().product();
                    let raw = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    b.tensors.insert(k, Tensor::new(&shape, data).map_err(|e| e.to_string())?);
                }
                ck.blocks.insert(name, b);
            }
            if r.pos != r.bytes.len() {
                return Err("trailing bytes after last block".into());
            }
            Ok(ck)
        };
        parse(&mut r).map_err(corrupt)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("checkpoint {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }
}
