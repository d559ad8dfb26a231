//! Desk-scale decoder-only transformer engine built around boundary register
//! tokens and depth-`k` pruning of prompt rows from computation and KV cache,
//! with an analytical cost model, attention-distribution analyzer, toy
//! trainer, synthetic recommendation data, and an efficiency harness.

pub mod attnstats;
pub mod bench;
pub mod costmodel;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod numkernel;
pub mod oracle;
pub mod recdata;
pub mod runtime;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, RegisterSpec, Role, SequenceLayout, Weights};
pub use numkernel::{FlopCounter, Matrix};
