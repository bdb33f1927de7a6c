//! Run configuration.
//!
//! Config files are TOML key/value pairs using the same names as the CLI
//! flags (with `_` for `-`):
//!
//! ```toml
//! grid = "48x48"        # HxW
//! rho = "1/6"           # exact fraction a/b
//! policy = "lineattn"   # full | lineattn | random | streaming | h2o | attacc
//! ablation = "disable-mid"  # optional: disable-init | disable-rec | disable-mid | attacc
//! n_init = 48           # optional, default one line
//! recent_lines = 2      # optional, default 2 (1 when the budget is tight)
//! layers = 4
//! heads = 4
//! kv_heads = 4
//! dim = 32
//! vocab = 256
//! cond_len = 8
//! seed = 0
//! trace_attention = false
//! ```
//!
//! Missing keys take defaults; command-line values override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::grid::{BudgetConfig, GridSpec, Rho};
use crate::policy::{EvictionPolicy, PolicyKind, Selector};

/// Component-removal and scoring ablations of the guided policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No anchor tokens (`n_init = 0`).
    DisableInit,
    /// No protected recent lines (`r = 0`); the one-line buffer remains.
    DisableRec,
    /// Mid tokens are always evicted oldest-first, so none survive.
    DisableMid,
    /// Accumulated attention replaces guided saliency.
    Attacc,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::DisableInit,
        Ablation::DisableRec,
        Ablation::DisableMid,
        Ablation::Attacc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::DisableInit => "disable-init",
            Ablation::DisableRec => "disable-rec",
            Ablation::DisableMid => "disable-mid",
            Ablation::Attacc => "attacc",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::ConfigParse(format!("unknown ablation {s:?}")))
    }
}

/// Fully resolved configuration of one decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub rho: Rho,
    pub policy: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_init: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recent_lines: Option<usize>,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub dim: usize,
    pub vocab: usize,
    pub cond_len: usize,
    pub seed: u64,
    pub trace_attention: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            grid: GridSpec { h: 16, w: 16 },
            rho: Rho::new(1, 4).expect("valid"),
            policy: PolicyKind::Lineattn,
            ablation: None,
            n_init: None,
            recent_lines: None,
            layers: m.layers,
            heads: m.heads,
            kv_heads: m.kv_heads,
            dim: m.head_dim,
            vocab: m.vocab,
            cond_len: m.cond_len,
            seed: 0,
            trace_attention: false,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            kv_heads: self.kv_heads,
            head_dim: self.dim,
            vocab: self.vocab,
            cond_len: self.cond_len,
            seed: self.seed,
        }
    }

    /// Effective budget. The full-cache policy always runs at ratio one.
    pub fn budget(&self) -> Result<BudgetConfig> {
        if self.policy == PolicyKind::Full && self.ablation.is_none() {
            return BudgetConfig::resolve(&self.grid, Rho::one(), self.n_init, self.recent_lines);
        }
        let base = BudgetConfig::resolve(&self.grid, self.rho, self.n_init, self.recent_lines)?;
        match self.ablation {
            Some(Ablation::DisableInit) => {
                BudgetConfig::ablated(&self.grid, self.rho, 0, base.recent_lines)
            }
            Some(Ablation::DisableRec) => BudgetConfig::ablated(&self.grid, self.rho, base.n_init, 0),
            _ => Ok(base),
        }
    }

    pub fn selector(&self) -> Option<Selector> {
        match self.ablation {
            None => self.policy.selector(),
            Some(Ablation::DisableInit | Ablation::DisableRec) => Some(Selector::Saliency),
            Some(Ablation::DisableMid) => Some(Selector::OldestMid),
            Some(Ablation::Attacc) => Some(Selector::Accumulated),
        }
    }

    /// Short label: the policy name, or the ablation arm when one is set.
    pub fn label(&self) -> &'static str {
        self.ablation.map_or(self.policy.name(), |a| a.name())
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<BudgetConfig> {
        self.model_config().validate()?;
        self.budget()
    }

    pub fn build_policy(&self) -> Result<EvictionPolicy> {
        Ok(EvictionPolicy::new(
            self.selector(),
            self.grid,
            self.budget()?,
            self.seed,
            self.layers,
            self.kv_heads,
            self.dim,
        ))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}

/// Every key optional: one layer of configuration (file or flags).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub grid: Option<GridSpec>,
    pub rho: Option<Rho>,
    pub policy: Option<PolicyKind>,
    pub ablation: Option<Ablation>,
    pub n_init: Option<usize>,
    pub recent_lines: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub kv_heads: Option<usize>,
    pub dim: Option<usize>,
    pub vocab: Option<usize>,
    pub cond_len: Option<usize>,
    pub seed: Option<u64>,
    pub trace_attention: Option<bool>,
}

const KNOWN_KEYS: [&str; 14] = [
    "grid",
    "rho",
    "policy",
    "ablation",
    "n_init",
    "recent_lines",
    "layers",
    "heads",
    "kv_heads",
    "dim",
    "vocab",
    "cond_len",
    "seed",
    "trace_attention",
];

impl PartialConfig {
    /// Values from `over` win.
    pub fn merge(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            grid: over.grid.or(self.grid),
            rho: over.rho.or(self.rho),
            policy: over.policy.or(self.policy),
            ablation: over.ablation.or(self.ablation),
            n_init: over.n_init.or(self.n_init),
            recent_lines: over.recent_lines.or(self.recent_lines),
            layers: over.layers.or(self.layers),
            heads: over.heads.or(self.heads),
            kv_heads: over.kv_heads.or(self.kv_heads),
            dim: over.dim.or(self.dim),
            vocab: over.vocab.or(self.vocab),
            cond_len: over.cond_len.or(self.cond_len),
            seed: over.seed.or(self.seed),
            trace_attention: over.trace_attention.or(self.trace_attention),
        }
    }

    pub fn resolve(self) -> RunConfig {
        let d = RunConfig::default();
        RunConfig {
            grid: self.grid.unwrap_or(d.grid),
            rho: self.rho.unwrap_or(d.rho),
            policy: self.policy.unwrap_or(d.policy),
            ablation: self.ablation,
            n_init: self.n_init,
            recent_lines: self.recent_lines,
            layers: self.layers.unwrap_or(d.layers),
            heads: self.heads.unwrap_or(d.heads),
            kv_heads: self.kv_heads.unwrap_or(d.kv_heads),
            dim: self.dim.unwrap_or(d.dim),
            vocab: self.vocab.unwrap_or(d.vocab),
            cond_len: self.cond_len.unwrap_or(d.cond_len),
            seed: self.seed.unwrap_or(d.seed),
            trace_attention: self.trace_attention.unwrap_or(d.trace_attention),
        }
    }
}

/// Parses config text; unknown keys are all reported together.
pub fn parse_config(text: &str) -> Result<PartialConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::ConfigParse(e.message().to_string()))?;
    let unknown: Vec<&str> = table
        .keys()
        .map(String::as_str)
        .filter(|k| !KNOWN_KEYS.contains(k))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownConfigKeys(unknown.join(", ")));
    }
    // accept bare integers for rho (`rho = 1`)
    let mut table = table;
    if let Some(toml::Value::Integer(i)) = table.get("rho").cloned() {
        table.insert("rho".into(), toml::Value::String(i.to_string()));
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::ConfigParse(e.message().to_string()))
}

/// Reads `path` (if any), applies `overrides`, and fills defaults.
pub fn load_config(path: Option<&Path>, overrides: PartialConfig) -> Result<RunConfig> {
    let file = match path {
        Some(p) => parse_config(&std::fs::read_to_string(p)?)?,
        None => PartialConfig::default(),
    };
    Ok(file.merge(overrides).resolve())
}
