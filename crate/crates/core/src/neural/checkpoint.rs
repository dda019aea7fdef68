//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PIVT" | version u32 | value width u8 (4 or 8) | header length u32 | header JSON
//! | parameter blocks in header order | [Adam step u64 | m blocks | v blocks]
//! | FNV-1a 64 of everything before it
//! ```
//!
//! The header carries the model configuration and the name and length of
//! every block, so a reader can reject files that do not match the model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::PivotModel;
use super::params::ParamSet;
use super::ModelConfig;
use crate::error::{PivotError, Result};
use crate::util::fnv1a64;

pub const MAGIC: &[u8; 4] = b"PIVT";
pub const VERSION: u32 = 1;

/// Width of stored parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ValueWidth {
    F32,
    /// Lossless for `f64` training.
    #[default]
    F64,
}

impl ValueWidth {
    fn bytes(self) -> u8 {
        match self {
            ValueWidth::F32 => 4,
            ValueWidth::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileHeader {
    /// What the blocks describe, e.g. `"pretrain"`.
    pub kind: String,
    pub epoch: usize,
    /// Serialized model configuration; its shape depends on `kind`.
    pub config: serde_json::Value,
    pub blocks: Vec<BlockInfo>,
    pub has_adam: bool,
}

/// A decoded parameter file.
#[derive(Debug, Clone)]
pub struct ParamFile {
    pub header: FileHeader,
    pub blocks: Vec<Vec<f64>>,
    pub adam: Option<AdamState>,
}

fn put_values(out: &mut Vec<u8>, values: &[f64], width: ValueWidth) {
    match width {
        ValueWidth::F32 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        ValueWidth::F64 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode(
    kind: &str,
    epoch: usize,
    config: serde_json::Value,
    params: &dyn ParamSet,
    adam: Option<&AdamState>,
    width: ValueWidth,
) -> Vec<u8> {
    let blocks = params.blocks();
    let header = FileHeader {
        kind: kind.to_string(),
        epoch,
        config,
        blocks: blocks
            .iter()
            .map(|(n, b)| BlockInfo {
                name: n.clone(),
                len: b.len(),
            })
            .collect(),
        has_adam: adam.is_some(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(32 + header.len() + params.num_params() * 8 * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width.bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, b) in &blocks {
        put_values(&mut out, b, width);
    }
    if let Some(a) = adam {
        out.extend_from_slice(&a.step.to_le_bytes());
        for m in &a.m {
            put_values(&mut out, m, width);
        }
        for v in &a.v {
            put_values(&mut out, v, width);
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PivotError::Format("parameter file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, width: u8) -> Result<Vec<f64>> {
        let raw = self.take(n * width as usize)?;
        Ok(match width {
            4 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            _ => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamFile> {
    if bytes.len() < 4 + 4 + 1 + 4 + 8 {
        return Err(PivotError::Format("parameter file truncated".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(PivotError::Format("bad magic, not a PIVT file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PivotError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    if fnv1a64(payload) != stored {
        return Err(PivotError::Format("checksum mismatch".into()));
    }
    let width = r.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(PivotError::Format(format!("bad value width {width}")));
    }
    let hlen = r.u32()? as usize;
    let header: FileHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| PivotError::Format(format!("bad header: {e}")))?;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for b in &header.blocks {
        blocks.push(r.values(b.len, width)?);
    }
    let adam = if header.has_adam {
        let step = r.u64()?;
        let mut m = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            m.push(r.values(b.len, width)?);
        }
        let mut v = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            v.push(r.values(b.len, width)?);
        }
        Some(AdamState { step, m, v })
    } else {
        None
    };
    if r.pos != payload.len() {
        return Err(PivotError::Format("trailing bytes after parameter data".into()));
    }
    Ok(ParamFile {
        header,
        blocks,
        adam,
    })
}

impl ParamFile {
    /// Copies the stored blocks into `params`, checking names and lengths.
    pub fn fill(&self, params: &mut dyn ParamSet) -> Result<()> {
        let mut target = params.blocks_mut();
        if target.len() != self.blocks.len() {
            return Err(PivotError::Format(format!(
                "file has {} parameter blocks, model expects {}",
                self.blocks.len(),
                target.len()
            )));
        }
        for ((name, dst), (info, src)) in target
            .iter_mut()
            .zip(self.header.blocks.iter().zip(&self.blocks))
        {
            if *name != info.name || dst.len() != src.len() {
                return Err(PivotError::Format(format!(
                    "block {} ({} values) does not match model block {} ({} values)",
                    info.name,
                    src.len(),
                    name,
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    fs::write(&tmp, bytes).map_err(|e| PivotError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PivotError::io(path, e))
}

pub const PRETRAIN_KIND: &str = "pretrain";

/// A pre-trained model, the epoch it was saved at, and optionally the
/// optimizer state needed to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: PivotModel,
    pub adam: Option<AdamState>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch}.pivt")
}

pub fn save_checkpoint(
    path: &Path,
    model: &PivotModel,
    epoch: usize,
    adam: Option<&AdamState>,
    width: ValueWidth,
) -> Result<()> {
    let config = serde_json::to_value(&model.config).expect("config serializes");
    let bytes = encode(PRETRAIN_KIND, epoch, config, model, adam, width);
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| PivotError::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let file = decode(bytes)?;
    if file.header.kind != PRETRAIN_KIND {
        return Err(PivotError::Format(format!(
            "expected a pre-training checkpoint, found {:?}",
            file.header.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(file.header.config.clone())
        .map_err(|e| PivotError::Format(format!("bad model config: {e}")))?;
    let mut model = PivotModel::new(config, 0)?;
    file.fill(&mut model)?;
    Ok(Checkpoint {
        epoch: file.header.epoch,
        model,
        adam: file.adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PivotModel {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            ff_dim: 16,
            head_hidden: 8,
            num_steps: 5,
            level_sizes: vec![2, 3],
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        PivotModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact_at_f64() {
        let m = small();
        let mut adam = AdamState::new(&m);
        adam.step = 7;
        adam.m[0][0] = 0.25;
        let cfg = serde_json::to_value(&m.config).unwrap();
        let bytes = encode(PRETRAIN_KIND, 50, cfg, &m, Some(&adam), ValueWidth::F64);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.epoch, 50);
        assert_eq!(back.model.flatten(), m.flatten());
        assert_eq!(back.adam.unwrap(), adam);
    }

    #[test]
    fn f32_width_rounds_each_value() {
        let m = small();
        let cfg = serde_json::to_value(&m.config).unwrap();
        let bytes = encode(PRETRAIN_KIND, 1, cfg, &m, None, ValueWidth::F32);
        let back = decode_checkpoint(&bytes).unwrap();
        for (a, b) in back.model.flatten().iter().zip(m.flatten()) {
            assert_eq!(*a, b as f32 as f64);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let m = small();
        let cfg = serde_json::to_value(&m.config).unwrap();
        let mut bytes = encode(PRETRAIN_KIND, 1, cfg, &m, None, ValueWidth::F64);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(PivotError::Format(_))));
        assert!(decode(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
