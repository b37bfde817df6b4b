//! Multipole attention for decode-time inference.
//!
//! Keys of the KV cache are clustered per kv-head. At every decode step the
//! query is compared against key centroids to estimate per-cluster attention
//! mass, the highest scoring clusters get exact attention up to a token budget,
//! and every remaining cluster contributes through its centroids weighted by its
//! size. Sinks and a local buffer of recent tokens are always attended exactly.
//!
//! Storage is generic over [`Scalar`] (`f32` or `f64`); accumulation is always `f64`.

pub mod attention;
pub mod bench;
pub mod clustering;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod rope;
pub mod scalar;
pub mod trace;

pub use attention::AttentionMode;
pub use config::{EngineConfig, HierarchyConfig};
pub use error::{Error, Result};
pub use pipeline::{run, DecodeReport, EngineState, RunOptions};
pub use scalar::Scalar;
pub use trace::{HeadLayout, KvTrace, SyntheticSpec};

pub type Trace = trace::KvTrace<f32>;
pub type Ledger = clustering::BlockLedger<f32>;
pub type Engine = pipeline::EngineState<f32>;
