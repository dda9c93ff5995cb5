//! Binary checkpoint: magic, version, JSON header, then named f32 tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::LanguageModel;
use super::params::{Float, Layout};
use super::LmError;

const MAGIC: &[u8; 8] = b"INFLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tokenizer_hash: String,
    pub best_val_perplexity: f64,
    pub step: usize,
}

/// A saved model: header plus parameters in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model<T: Float>(
        model: &LanguageModel<T>,
        tokenizer_hash: impl Into<String>,
        best_val_perplexity: f64,
        step: usize,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                config: model.config().clone(),
                tokenizer_hash: tokenizer_hash.into(),
                best_val_perplexity,
                step,
            },
            params: model.params().iter().map(|p| p.f() as f32).collect(),
        }
    }

    pub fn model(&self) -> Result<LanguageModel<f32>, LmError> {
        LanguageModel::from_params(self.header.config.clone(), self.params.clone())
    }

    /// Fails unless the checkpoint was trained with the given tokenizer.
    pub fn check_tokenizer(&self, tokenizer_hash: &str) -> Result<(), LmError> {
        if self.header.tokenizer_hash != tokenizer_hash {
            return Err(LmError::TokenizerMismatch {
                expected: self.header.tokenizer_hash.clone(),
                found: tokenizer_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, LmError> {
        let layout = Layout::new(&self.header.config);
        if layout.total != self.params.len() {
            return Err(LmError::InvalidConfig("parameter count does not match config".into()));
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| LmError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(self.params.len() * 4 + header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(layout.named.len() as u32).to_le_bytes());
        for (name, slot) in &layout.named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims: Vec<u32> =
                if slot.rows == 1 { vec![slot.cols as u32] } else { vec![slot.rows as u32, slot.cols as u32] };
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &self.params[slot.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LmError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(LmError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(LmError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| LmError::Checkpoint(e.to_string()))?;
        header.config.validate()?;
        let layout = Layout::new(&header.config);
        let count = r.u32()? as usize;
        if count != layout.named.len() {
            return Err(LmError::Checkpoint(format!("expected {} tensors, found {count}", layout.named.len())));
        }
        let mut params = vec![0f32; layout.total];
        for (name, slot) in &layout.named {
            let name_len = r.u32()? as usize;
            let found = std::str::from_utf8(r.take(name_len)?).map_err(|e| LmError::Checkpoint(e.to_string()))?;
            if found != name {
                return Err(LmError::Checkpoint(format!("expected tensor {name}, found {found}")));
            }
            let ndim = r.u32()? as usize;
            let mut numel = 1usize;
            for _ in 0..ndim {
                numel *= r.u32()? as usize;
            }
            if numel != slot.len() {
                return Err(LmError::Checkpoint(format!("tensor {name} has wrong shape")));
            }
            for (dst, chunk) in params[slot.range()].iter_mut().zip(r.take(numel * 4)?.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(LmError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LmError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LmError::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, LmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
