//! Line-granular KV-cache compression for raster-order autoregressive
//! decoding, with baselines, a deterministic toy decoder, attention
//! analyses and a benchmark harness.
//!
//! The visual cache of every `(layer, kv-head)` is split by 1-based line
//! into an anchor region (the first `n_init` positions), a recent window
//! (the last `r` lines) and a middle region. Once a head holds `B` visual
//! entries, the end of each line evicts the `w` middle entries that the
//! finished line's queries attended to least.

pub mod analysis;
pub mod attention;
pub mod baselines;
pub mod bench;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod grid;
pub mod oracle;
pub mod policy;
pub mod trace;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use grid::{BudgetConfig, GridSpec, Rho, VisualKvCache};
pub use policy::{EvictionPolicy, PolicyKind};
pub use trace::{run, DecodeTrace};
