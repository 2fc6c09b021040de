//! Knowledge-specific adapters plugged outside a frozen transformer backbone.
//!
//! The crate is organized around a small dense-tensor autodiff engine
//! ([`ndgrad`]) on top of which sit:
//!
//! - [`backbone`]: a compact transformer encoder whose per-layer hidden
//!   states are exposed for adapter injection and which stays frozen while
//!   adapters train,
//! - [`adapter`]: the adapter layers (down-projection, inner transformer
//!   blocks, up-projection, skip), multi-adapter fusion, and the parameter
//!   count of an adapter model,
//! - [`tasks`]: pre-training and fine-tuning heads with their losses and
//!   metrics,
//! - [`trainer`]: AdamW with warmup/decay scheduling, prefix-based parameter
//!   freezing, the pre-train/fine-tune loops, and the forgetting experiment,
//! - [`corpus`]: tokenization, file formats, and the synthetic corpus
//!   generators,
//! - [`probe`]: cloze-style probing with an MLM head trained in isolation,
//! - [`cli`]: the subcommand implementations behind the `kadapter` binary.
//!
//! Everything runs in 64-bit floats on the CPU and is deterministic in the
//! configured seed: the same config produces bit-identical checkpoints.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod ndgrad;
pub mod params;
pub mod probe;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use ndgrad::{Graph, Tensor, Var};
pub use params::{Binder, ParamStore};
