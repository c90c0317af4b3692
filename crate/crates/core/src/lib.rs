//! Disturbing-content flagging from stacked transformer task models.
//!
//! Task models (classification, multi-label, regression heads over a small
//! transformer encoder) are fine-tuned one per labeled corpus. Free text is
//! split into fixed-size chunks, every task model scores every chunk, and the
//! per-chunk probabilities are averaged into one feature vector. A logistic
//! regression over those features produces the final probability and flag.

pub mod batcher;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod stacking;
pub mod textproc;
pub mod trainer;

pub use error::{Error, Result};
