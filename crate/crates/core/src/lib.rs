//! Positional-encoding weaving and chunked long-context inference for small
//! decoder-only transformers.
//!
//! - [`pe`]: score functions (NoPE, RoPE, ALiBi) and weave functions
//!   (ReRoPE, Leaky-ReRoPE, Stair, Self-Extend), plus position matrices.
//! - [`masks`]: causal, Λ-shaped and attention-sink masks.
//! - [`splitter`]: DynamicSplit chunk planning.
//! - [`model`]: the transformer, its weights and the raw key/value cache.
//! - [`mesa`]: chunked prefill with a woven last chunk, and decoding.
//! - [`theory`]: hand-built weights for the threshold theorems and their scans.
//! - [`eval`]: passkey corpora, cell counts, benchmarks.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and sequentially otherwise; see [`Parallelism`].

pub mod error;
pub mod eval;
pub mod exec;
pub mod masks;
pub mod mesa;
pub mod model;
pub mod pe;
pub mod splitter;
pub mod theory;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use mesa::{decode_step, generate, prefill, MesaConfig, PrefillMode};
pub use pe::{Scheme, Weave, WeaveParams};
pub use splitter::{chunk_spans, dynamic_split, ChunkPlan, SplitParams};
pub use theory::{Construction, ThresholdReport, TheoryConfig};
