//! Taris: online speech recognition that learns to segment speech by
//! counting words.
//!
//! The crate provides a windowed-attention Transformer encoder/decoder, a
//! self-supervised word-counting gate whose cumulative score induces a
//! dynamic segmentation of the input frames, a decoder whose attention span
//! and stopping rule follow that segmentation, and the training, decoding,
//! and data plumbing needed to run the whole system on synthetic corpora.

pub mod data;
pub mod error;
pub mod mask;
pub mod rng;
pub mod segmentation;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::{AttentionMask, Window, MASK_LARGE};
pub use rng::{RngState, SeedRng};
pub use tensor::{backward, grad_check, grad_check_sampled, Precision, Tape, Tensor};
