//! Memory and throughput accounting for decode traces.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trace::DecodeTrace;

/// Cached entries at one step, counted after the step's append (the
/// in-step peak).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepMemory {
    pub step: usize,
    /// Visual entries summed over all layers and kv heads.
    pub visual_entries: usize,
    /// Conditional plus visual entries over all layers and kv heads.
    pub entries: usize,
    pub max_head_visual: usize,
    pub bytes_fp16: u64,
    pub bytes_fp32: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub per_step: Vec<StepMemory>,
    pub peak_entries: usize,
    /// Largest per-head visual length seen at any step.
    pub peak_head_visual: usize,
    pub peak_bytes_fp16: u64,
    pub peak_bytes_fp32: u64,
}

/// K and V, `d` scalars each.
pub fn entry_bytes(entries: usize, head_dim: usize, bytes_per_scalar: u64) -> u64 {
    entries as u64 * 2 * head_dim as u64 * bytes_per_scalar
}

pub fn memory_report(trace: &DecodeTrace) -> MemoryReport {
    let c = trace.config();
    let cond_total = c.cond_len * c.layers * c.kv_heads;
    let per_step: Vec<StepMemory> = trace
        .steps
        .iter()
        .map(|s| {
            let visual: usize = s.visual_lens.iter().sum();
            let entries = visual + cond_total;
            StepMemory {
                step: s.step,
                visual_entries: visual,
                entries,
                max_head_visual: s.visual_lens.iter().copied().max().unwrap_or(0),
                bytes_fp16: entry_bytes(entries, c.dim, 2),
                bytes_fp32: entry_bytes(entries, c.dim, 4),
            }
        })
        .collect();
    let peak_entries = per_step.iter().map(|m| m.entries).max().unwrap_or(cond_total);
    MemoryReport {
        peak_head_visual: per_step.iter().map(|m| m.max_head_visual).max().unwrap_or(0),
        peak_bytes_fp16: entry_bytes(peak_entries, c.dim, 2),
        peak_bytes_fp32: entry_bytes(peak_entries, c.dim, 4),
        peak_entries,
        per_step,
    }
}

/// Fractional peak-memory saving of `run` relative to `full`.
pub fn memory_saving(run: &MemoryReport, full: &MemoryReport) -> f64 {
    1.0 - run.peak_entries as f64 / full.peak_entries as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitHalf {
    /// Tokens per second over the first `N/2` steps.
    pub first_half_rate: f64,
    pub second_half_rate: f64,
    /// `second / first`; below one means decoding slowed down.
    pub ratio: f64,
}

/// Split-half rates from per-step durations in nanoseconds.
pub fn split_half_rates(step_ns: &[u64]) -> Result<SplitHalf> {
    if step_ns.len() < 2 {
        return Err(Error::TraceMissingTimings);
    }
    let half = step_ns.len() / 2;
    let rate = |xs: &[u64]| {
        let secs = xs.iter().sum::<u64>() as f64 * 1e-9;
        xs.len() as f64 / secs
    };
    let first = rate(&step_ns[..half]);
    let second = rate(&step_ns[half..]);
    Ok(SplitHalf {
        first_half_rate: first,
        second_half_rate: second,
        ratio: second / first,
    })
}

pub fn split_half_throughput(trace: &DecodeTrace) -> Result<SplitHalf> {
    split_half_rates(&step_ns(trace)?)
}

/// Per-step median duration over repeated runs of the same configuration.
/// Damps interference from other processes before split-half rates.
pub fn median_step_ns(runs: &[Vec<u64>]) -> Result<Vec<u64>> {
    let n = runs.first().map_or(0, Vec::len);
    if n == 0 || runs.iter().any(|r| r.len() != n) {
        return Err(Error::TraceMissingTimings);
    }
    let mut col = Vec::with_capacity(runs.len());
    Ok((0..n)
        .map(|i| {
            col.clear();
            col.extend(runs.iter().map(|r| r[i]));
            col.sort_unstable();
            let m = col.len();
            if m % 2 == 1 {
                col[m / 2]
            } else {
                (col[m / 2 - 1] + col[m / 2]) / 2
            }
        })
        .collect())
}

/// Timing vector of a trace recorded with timings.
pub fn step_ns(trace: &DecodeTrace) -> Result<Vec<u64>> {
    if !trace.has_timings() {
        return Err(Error::TraceMissingTimings);
    }
    Ok(trace.steps.iter().map(|s| s.step_ns.unwrap_or(0)).collect())
}

/// Per-step attention work: over layers and query heads, attended keys
/// times `2 d` (scores plus weighted values).
pub fn flops_proxy(trace: &DecodeTrace) -> Vec<u64> {
    let c = trace.config();
    let group = c.heads / c.kv_heads;
    trace
        .steps
        .iter()
        .map(|s| {
            s.visual_lens
                .iter()
                .map(|&m| ((c.cond_len + m) * group * 2 * c.dim) as u64)
                .sum()
        })
        .collect()
}

/// Mean of the second half of a per-step series.
pub fn mean_last_half(xs: &[u64]) -> f64 {
    let tail = &xs[xs.len() / 2..];
    tail.iter().map(|&x| x as f64).sum::<f64>() / tail.len().max(1) as f64
}

pub const STEP_CSV_HEADER: &str = "step,policy,rho,seed,entries,bytes_fp16,bytes_fp32,flops_proxy,step_ns";

/// Per-step rows for one run, without header.
pub fn step_csv_rows(trace: &DecodeTrace, out: &mut String) {
    let c = trace.config();
    let rho = trace.header.budget.rho;
    let mem = memory_report(trace);
    let flops = flops_proxy(trace);
    for ((s, m), f) in trace.steps.iter().zip(&mem.per_step).zip(&flops) {
        let ns = s.step_ns.map(|n| n.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.step,
            c.label(),
            rho,
            c.seed,
            m.entries,
            m.bytes_fp16,
            m.bytes_fp32,
            f,
            ns
        );
    }
}
