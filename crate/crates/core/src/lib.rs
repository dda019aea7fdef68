//! Procedural and hierarchical pre-training for instructional video
//! representations: synthetic corpora, pseudo-label mining, sequence
//! augmentation, a small transformer encoder, joint pre-training with
//! analytical early stopping, and downstream transfer tasks.

pub mod augment;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod mining;
pub mod neural;
pub mod pretrain;
pub mod textsim;
pub mod util;

pub use error::{PivotError, Result};
