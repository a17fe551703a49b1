//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "TWO1CKPT"
//! version    u32 LE
//! sections   u32 count, then per section:
//!              u32 name length, name (UTF-8), u64 payload length, payload
//! checksum   32 bytes SHA-256 of everything before it
//! ```
//!
//! Tensor payloads are `u32 ndim`, `ndim × u64` extents, then `f64` values,
//! all little-endian. Sections are written sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::AdamState;
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"TWO1CKPT";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Serialisable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut b = self.seed.to_vec();
        b.extend_from_slice(&self.stream.to_le_bytes());
        b.extend_from_slice(&self.word_pos.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != 32 + 8 + 16 {
            return Err(Error::Integrity(format!("rng section has {} bytes", b.len())));
        }
        Ok(Self {
            seed: b[..32].try_into().expect("length checked"),
            stream: u64::from_le_bytes(b[32..40].try_into().expect("length checked")),
            word_pos: u128::from_le_bytes(b[40..56].try_into().expect("length checked")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub train_digest: String,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub epoch: u64,
    pub rng: RngState,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut b = Vec::with_capacity(4 + 8 * t.shape().len() + 8 * t.len());
    b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn tensor_from_bytes(b: &[u8], name: &str) -> Result<Tensor> {
    let mut r = Reader { bytes: b, pos: 0 };
    let ndim = r.u32(name)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64(name)? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = r.take(n * 8, name)?;
    if r.pos != b.len() {
        return Err(Error::Integrity(format!("trailing bytes in tensor {name}")));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("tensor {name}: {e}")))
}

impl Checkpoint {
    fn sections(&self) -> BTreeMap<String, Vec<u8>> {
        let mut s = BTreeMap::new();
        s.insert("encoder_config".to_string(), self.encoder.to_kv().into_bytes());
        s.insert("train_digest".to_string(), self.train_digest.clone().into_bytes());
        s.insert("epoch".to_string(), self.epoch.to_le_bytes().to_vec());
        s.insert("rng".to_string(), self.rng.to_bytes());
        for (name, t) in &self.params.tensors {
            s.insert(format!("tensor/{name}"), tensor_bytes(t));
        }
        if let Some(opt) = &self.optimizer {
            s.insert("adam_step".to_string(), opt.step.to_le_bytes().to_vec());
            for (name, t) in &opt.m {
                s.insert(format!("adam.m/{name}"), tensor_bytes(t));
            }
            for (name, t) in &opt.v {
                s.insert(format!("adam.v/{name}"), tensor_bytes(t));
            }
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_version(FORMAT_VERSION)
    }

    pub(crate) fn to_bytes_with_version(&self, version: u32) -> Vec<u8> {
        let sections = self.sections();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in &sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(Error::Integrity(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("bad magic bytes".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let count = r.u32("section count")?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("section name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "section name")?)
                .map_err(|_| Error::Integrity("section name is not UTF-8".into()))?
                .to_string();
            let len = r.u64("section length")? as usize;
            let payload = r.take(len, &name)?;
            sections.insert(name, payload);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after sections".into()));
        }

        let need = |k: &str| {
            sections
                .get(k)
                .copied()
                .ok_or_else(|| Error::Integrity(format!("missing section {k}")))
        };
        let text = |k: &str| -> Result<String> {
            String::from_utf8(need(k)?.to_vec()).map_err(|_| Error::Integrity(format!("section {k} is not UTF-8")))
        };
        let u64_section = |k: &str| -> Result<u64> {
            let b = need(k)?;
            let arr: [u8; 8] = b
                .try_into()
                .map_err(|_| Error::Integrity(format!("section {k} has {} bytes", b.len())))?;
            Ok(u64::from_le_bytes(arr))
        };

        let encoder = EncoderConfig::from_kv(&text("encoder_config")?)?;
        let mut tensors = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, payload) in &sections {
            if let Some(n) = name.strip_prefix("tensor/") {
                tensors.insert(n.to_string(), tensor_from_bytes(payload, name)?);
            } else if let Some(n) = name.strip_prefix("adam.m/") {
                m.insert(n.to_string(), tensor_from_bytes(payload, name)?);
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                v.insert(n.to_string(), tensor_from_bytes(payload, name)?);
            }
        }
        let optimizer = if sections.contains_key("adam_step") {
            Some(AdamState {
                step: u64_section("adam_step")?,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Self {
            encoder,
            train_digest: text("train_digest")?,
            params: ModelParams { tensors },
            optimizer,
            epoch: u64_section("epoch")?,
            rng: RngState::from_bytes(need("rng")?)?,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
