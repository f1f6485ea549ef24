//! Cross-modal alignment of structural brain connectomes with clinical
//! report text.
//!
//! Each region's connectivity profile becomes one token of a transformer
//! encoder; clinical narratives go through a compact word-level transformer.
//! The two are tied together by token-level (connectome) and subject-level
//! cross-attention alignment losses, and a fused classifier predicts NC/MCI.
//! Everything runs on a small float64 reverse-mode autodiff engine.

pub mod align;
pub mod connectome;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
