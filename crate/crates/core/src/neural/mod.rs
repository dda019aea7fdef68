//! Transformer encoder, heads, joint loss, optimizer and checkpoints.
//!
//! Everything runs in `f64` with hand-written backward passes.

pub mod adam;
pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod layer;
pub mod mlp;
pub mod model;
pub mod ops;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{PivotError, Result};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoder::{Encoder, EncoderPass, PackedInput};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layer::Segment;
pub use model::{Batch, BatchItem, Losses, PivotModel};
pub use params::ParamSet;

/// How a video embedding is read from the clip encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Masked mean over layer-1 outputs.
    Mean,
    /// A second encoder layer, read at the first position.
    #[default]
    Tfenc,
}

impl std::str::FromStr for PoolMode {
    type Err = PivotError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolMode::Mean),
            "tfenc" => Ok(PoolMode::Tfenc),
            other => Err(PivotError::Validation(format!(
                "unknown pooling mode {other:?} (expected mean or tfenc)"
            ))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Mean => "mean",
            PoolMode::Tfenc => "tfenc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub head_hidden: usize,
    pub pool: PoolMode,
    pub num_steps: usize,
    /// Number of nodes at each hierarchy level, root first.
    pub level_sizes: Vec<usize>,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Prepend a learned token before the pooling layer.
    pub cls_token: bool,
    /// Add sinusoidal positional encodings to the input.
    pub positional: bool,
    /// Multiplies the sinusoidal table. Unscaled rows have norm `√(dim/2)`,
    /// which would swamp clip embeddings of norm around one.
    pub positional_scale: f64,
    pub step_weight: f64,
    pub path_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            ff_dim: 256,
            head_hidden: 64,
            pool: PoolMode::Tfenc,
            num_steps: 1,
            level_sizes: Vec::new(),
            max_seq_len: 128,
            dropout: 0.1,
            cls_token: false,
            positional: true,
            positional_scale: 0.125,
            step_weight: 1.0,
            path_weight: 1.0,
        }
    }
}

impl ModelConfig {
    /// Defaults sized for `dim`, with `ff_dim = 4·dim` and `head_hidden = dim`.
    pub fn for_dim(dim: usize, num_steps: usize, level_sizes: Vec<usize>) -> Self {
        ModelConfig {
            dim,
            ff_dim: 4 * dim,
            head_hidden: dim,
            positional_scale: 1.0 / (dim as f64).sqrt(),
            num_steps,
            level_sizes,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PivotError::Validation(m));
        if self.dim == 0 || self.heads == 0 {
            return bad("dim and heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.ff_dim == 0 || self.head_hidden == 0 || self.num_steps == 0 {
            return bad("ff_dim, head_hidden and num_steps must be positive".into());
        }
        if self.level_sizes.contains(&0) {
            return bad("every hierarchy level needs at least one node".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.positional_scale.is_finite() && self.positional_scale >= 0.0) {
            return bad("positional_scale must be finite and non-negative".into());
        }
        if !(self.step_weight.is_finite() && self.path_weight.is_finite()) {
            return bad("loss weights must be finite".into());
        }
        Ok(())
    }
}
