//! Unpaired multiview learning with narration-mined pseudo-pairs.
//!
//! First-person clips borrow supervision from an unpaired third-person pool:
//! each first-person clip is paired with the third-person clip whose
//! narration embedding is most similar ([`mining`]), pairs above a similarity
//! gate are aligned with a semantics-weighted decoupled contrastive loss, and
//! every clip is also aligned with its own narration ([`losses`]). Small MLP
//! encoders with hand-written backpropagation ([`model`]) are trained in two
//! stages on synthetic verb/noun worlds ([`datagen`], [`pipeline`]).

pub mod config;
pub mod datagen;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod losses;
pub mod mining;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seed;

pub use config::{parse_config, DataConfig, ExperimentConfig};
pub use error::{Error, Result};
pub use fsutil::atomic_write;
