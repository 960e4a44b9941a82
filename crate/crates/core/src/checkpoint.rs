//! Binary checkpoints: a versioned header, the configuration text, and named
//! tensors stored as little-endian `f64`.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TRJFCKPT" | u32 version | str kind | str config | u32 count
//! count × ( str name | u32 rank | rank × u64 extent | numel × f64 )
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8.

use std::path::Path;

use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::config::{self, ConfigDoc};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::fm::{FlowMatchModel, FmConfig};
use crate::model::ntm::NtmModel;
use crate::nn::ParamSet;
use crate::sampling::{Denoiser, DenoiserConfig};

const MAGIC: &[u8; 8] = b"TRJFCKPT";
pub const VERSION: u32 = 1;

pub const KIND_FM: &str = "flow-matching";
pub const KIND_NTM: &str = "trajectory-model";
pub const KIND_DENOISER: &str = "denoiser";

const REFERENCE_PREFIX: &str = "reference.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let kind = r.str()?;
        let config = r.str()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let bytes = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?,
            )?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<ConfigDoc> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        ConfigDoc::parse(&self.config)
    }
}

/// Git-style content hash: SHA-256 of `"blob {len}\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn restore(params: &mut ParamSet, tensors: &[(String, Tensor)]) -> Result<()> {
    params.load(tensors).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn dim_of(doc: &ConfigDoc, key: &str) -> Result<usize> {
    doc.require(key)
}

pub fn fm_checkpoint(fm: &FlowMatchModel) -> Checkpoint {
    let mut doc = ConfigDoc::new();
    config::fm_config_to(&mut doc, &fm.config);
    Checkpoint {
        kind: KIND_FM.into(),
        config: doc.to_text(),
        tensors: fm.params.to_named(),
    }
}

fn fm_from_doc(doc: &ConfigDoc, tensors: &[(String, Tensor)]) -> Result<FlowMatchModel> {
    let dim = dim_of(doc, "fm.dim")?;
    let cfg: FmConfig = config::fm_config_from(doc, dim, crate::cond::ConditionSpec::None)?;
    // the seed only affects initial values, which are overwritten
    let mut fm = FlowMatchModel::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    restore(&mut fm.params, tensors)?;
    Ok(fm)
}

pub fn fm_from_checkpoint(ck: &Checkpoint) -> Result<FlowMatchModel> {
    let doc = ck.expect_kind(KIND_FM)?;
    fm_from_doc(&doc, &ck.tensors)
}

pub fn ntm_checkpoint(model: &NtmModel) -> Checkpoint {
    let mut doc = ConfigDoc::new();
    config::ntm_config_to(&mut doc, &model.config);
    let mut tensors = model.params.to_named();
    if let Some(fm) = &model.reference {
        let mut rdoc = ConfigDoc::new();
        config::fm_config_to(&mut rdoc, &fm.config);
        for k in rdoc.keys().map(str::to_string).collect::<Vec<_>>() {
            doc.set(&format!("reference.{k}"), rdoc.raw(&k).unwrap_or_default());
        }
        tensors.extend(
            fm.params
                .to_named()
                .into_iter()
                .map(|(n, t)| (format!("{REFERENCE_PREFIX}{n}"), t)),
        );
    }
    Checkpoint {
        kind: KIND_NTM.into(),
        config: doc.to_text(),
        tensors,
    }
}

pub fn ntm_from_checkpoint(ck: &Checkpoint) -> Result<NtmModel> {
    let doc = ck.expect_kind(KIND_NTM)?;
    let dim = dim_of(&doc, "model.dim")?;
    let cfg = config::ntm_config_from(&doc, dim, crate::cond::ConditionSpec::None)?;
    let mut model = NtmModel::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let (refs, own): (Vec<_>, Vec<_>) = ck
        .tensors
        .iter()
        .cloned()
        .partition(|(n, _)| n.starts_with(REFERENCE_PREFIX));
    restore(&mut model.params, &own)?;
    if !refs.is_empty() {
        let mut rdoc = ConfigDoc::new();
        for k in doc.keys() {
            if let Some(rest) = k.strip_prefix(REFERENCE_PREFIX) {
                rdoc.set(rest, doc.raw(k).unwrap_or_default());
            }
        }
        let refs: Vec<_> = refs
            .into_iter()
            .map(|(n, t)| (n[REFERENCE_PREFIX.len()..].to_string(), t))
            .collect();
        model.reference = Some(fm_from_doc(&rdoc, &refs)?);
    }
    Ok(model)
}

pub fn denoiser_checkpoint(den: &Denoiser) -> Checkpoint {
    let mut doc = ConfigDoc::new();
    config::denoiser_config_to(&mut doc, &den.config);
    Checkpoint {
        kind: KIND_DENOISER.into(),
        config: doc.to_text(),
        tensors: den.params.to_named(),
    }
}

pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<Denoiser> {
    let doc = ck.expect_kind(KIND_DENOISER)?;
    let dim = dim_of(&doc, "denoiser.dim")?;
    let cfg: DenoiserConfig = config::denoiser_config_from(&doc, dim, crate::cond::ConditionSpec::None)?;
    let mut den = Denoiser::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    restore(&mut den.params, &ck.tensors)?;
    Ok(den)
}
