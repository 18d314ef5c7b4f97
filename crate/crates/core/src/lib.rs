//! Parallel text and speech token generation.
//!
//! A PSLM model reads and writes one text token and `S` speech tokens per
//! decode step, so a spoken answer can start while its text is still being
//! written. This crate holds a complete desk-scale version of that idea:
//!
//! * [`streams`]: stream interleaving, text padding, training layouts for
//!   the parallel model and the Chain-of-Modality (CoM) baseline.
//! * [`model`]: a small transformer with summed per-stream embeddings and
//!   per-stream output heads, plus an exact key/value cache.
//! * [`train`]: the weighted multi-stream loss, Adam training, and a
//!   finite-difference gradient check.
//! * [`decode`]: top-k/top-p sampling, parallel and CoM decoding, failure
//!   detection.
//! * [`vocoder`]: the receptive-field schedule of a streaming detokenizer.
//! * [`latency`]: closed-form response latency for both pipelines.
//! * [`metrics`], [`corpus`]: character error rate, failure rate, and a
//!   deterministic synthetic spoken-QA corpus with an exact inverse.
//!
//! The guide under `book/` walks through each piece with runnable snippets.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod latency;
pub mod metrics;
pub mod model;
pub mod streams;
pub mod train;
pub mod vocoder;

pub use error::{Error, Result};
pub use model::{FrameLogits, ModelConfig, ModelState};
pub use streams::{MultiStreamSequence, SpeechToken, TextToken, VocabSpec};
