//! Driver activity classification from multi-view vision-language embeddings.
//!
//! Pipeline: each synchronized camera frame is embedded by a frozen
//! contrastive vision-language image encoder, the per-view embeddings run
//! through independent fully-connected branches, the branch outputs are
//! concatenated into a fully-connected fusion head, the per-frame argmax is
//! taken, and a sliding-window mode filter smooths the label sequence.

pub mod cli;
pub mod config;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod filter;
pub mod manifest;
pub mod model;
pub mod store;
pub mod synthetic;
pub mod train;
pub mod util;

pub use error::{Error, Result};
