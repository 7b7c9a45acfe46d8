//! Contrastive initialization (COIN) for fine-tuning contrastively pre-trained
//! encoders, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense layers, ReLU and row normalisation with hand-written
//!   backward passes, plus a central finite-difference gradient oracle.
//! - [`model`]: the encoder / projector / classifier stack and its checkpoint format.
//! - [`losses`]: supervised contrastive loss, cross-entropy and their weighted sum.
//! - [`metrics`]: the S_Dbw cluster-validity score and top-1 accuracy.
//! - [`datagen`]: Gaussian blobs, vector augmentations and stratified splits.
//! - [`pipeline`]: toy self-supervised pretraining, the contrastive
//!   initialization stage, fine-tuning and the baseline runners.
//! - [`expcli`]: experiment spec files and the `coin` command-line harness.

pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod expcli;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;

pub use error::{CoinError, Result};

/// Formats a float with 17 significant digits so it parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
