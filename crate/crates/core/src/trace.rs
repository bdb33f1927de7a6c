//! Decode traces and their JSON Lines form.
//!
//! A trace file is one JSON object per line, tagged by `"type"`:
//!
//! 1. `header`: schema name and version, weight PRNG, the resolved run
//!    config, the effective budget and the conditional token ids;
//! 2. one `step` per decoded token (see [`StepRecord`]); line-end eviction
//!    reports `{line, layer, head, evicted_positions}` ride on the step that
//!    closed the line;
//! 3. `footer`: emitted tokens and the final residual stream.
//!
//! `step_ns` is the only wall-clock field; everything else is a pure
//! function of the header.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{cond_tokens_for_seed, generate, StepRecord, ToyModel, PRNG_ALGORITHM};
use crate::error::{Error, Result};
use crate::grid::BudgetConfig;
use crate::policy::EvictionReport;

pub const TRACE_SCHEMA: &str = "linear-kv-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub prng: String,
    pub config: RunConfig,
    pub budget: BudgetConfig,
    pub cond_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub tokens: Vec<u32>,
    pub final_hidden: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
    Footer(TraceFooter),
}

/// A complete decoding run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub footer: TraceFooter,
}

/// Builds the model, prefills, and decodes every grid position.
pub fn run(cfg: &RunConfig, record_timings: bool) -> Result<DecodeTrace> {
    let budget = cfg.validate()?;
    let model = ToyModel::new(cfg.model_config())?;
    let cond_tokens = cond_tokens_for_seed(cfg.seed, cfg.cond_len, cfg.vocab);
    let policy = cfg.build_policy()?;
    let gen = generate(
        &model,
        &cond_tokens,
        cfg.grid,
        policy,
        cfg.trace_attention,
        record_timings,
    )?;
    Ok(DecodeTrace {
        header: TraceHeader {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
            prng: PRNG_ALGORITHM.into(),
            config: cfg.clone(),
            budget,
            cond_tokens,
        },
        steps: gen.steps,
        footer: TraceFooter {
            tokens: gen.tokens,
            final_hidden: gen.final_hidden,
        },
    })
}

impl DecodeTrace {
    pub fn config(&self) -> &RunConfig {
        &self.header.config
    }

    pub fn evictions(&self) -> impl Iterator<Item = &EvictionReport> {
        self.steps.iter().flat_map(|s| s.evictions.iter())
    }

    /// Lines at whose end at least one head was compressed, ascending.
    pub fn eviction_lines(&self) -> Vec<usize> {
        let mut lines: Vec<usize> = self
            .steps
            .iter()
            .filter(|s| !s.evictions.is_empty())
            .map(|s| s.evictions[0].line)
            .collect();
        lines.dedup();
        lines
    }

    pub fn has_attention(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.attention.is_some())
    }

    pub fn has_timings(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.step_ns.is_some())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |v: &TraceLine| -> Result<()> {
            serde_json::to_writer(&mut w, v).map_err(|e| Error::Io(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&TraceLine::Header(self.header.clone()))?;
        for s in &self.steps {
            line(&TraceLine::Step(s.clone()))?;
        }
        line(&TraceLine::Footer(self.footer.clone()))?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// JSON Lines with every timing field dropped.
    pub fn body_without_timings(&self) -> String {
        let mut t = self.clone();
        for s in &mut t.steps {
            s.step_ns = None;
        }
        t.to_jsonl()
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let mut footer = None;
        let mut steps = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line)
                .map_err(|e| Error::TraceParse(format!("line {}: {e}", n + 1)))?;
            match parsed {
                TraceLine::Header(h) => header = Some(h),
                TraceLine::Step(s) => steps.push(s),
                TraceLine::Footer(f) => footer = Some(f),
            }
        }
        let header = header.ok_or_else(|| Error::TraceParse("missing header".into()))?;
        if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
            return Err(Error::TraceParse(format!(
                "unsupported schema {} v{}",
                header.schema, header.version
            )));
        }
        let footer = footer.ok_or_else(|| Error::TraceParse("missing footer".into()))?;
        Ok(Self {
            header,
            steps,
            footer,
        })
    }

    pub fn read_path(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}
