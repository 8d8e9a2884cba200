//! Compositional zero-shot recognition with learnable primitive prompts.
//!
//! Learnable primitive tokens feed a frozen toy text encoder. Training keeps
//! each seen primitive's distribution over its initial nearest neighbours
//! stable, and at inference unseen primitives borrow the training shifts of
//! their most similar seen primitives.

pub mod adapter;
pub mod datagen;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod pipeline;
pub mod sas;
pub mod structure;
pub mod table;
pub mod training;
pub mod vocab_space;

pub use error::{Result, SpaError};
