//! Attention statistics over recorded traces: how mass splits between the
//! conditional prefix and visual tokens, how it falls off with raster
//! distance, and how similar consecutive lines' attention over earlier
//! regions is.
//!
//! All functions need a trace recorded with attention tracing on.

use std::fmt::Write as _;

use serde::Serialize;

use crate::decoder::StepRecord;
use crate::error::{Error, Result};
use crate::trace::DecodeTrace;

/// Name of the similarity measure reported in outputs.
pub const SIMILARITY_MEASURE: &str = "cosine";

const NORMALIZATION_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Allocation {
    pub cond_mass: f64,
    pub visual_mass: f64,
    /// Mean weight per conditional token.
    pub cond_mean: f64,
    /// Mean weight per visual token (0 when there are none).
    pub visual_mean: f64,
}

/// Splits one attention row over `[conditional (C), visual (m)]`.
pub fn attention_allocation(row: &[f32], cond_len: usize) -> Result<Allocation> {
    let total: f64 = row.iter().map(|&w| f64::from(w)).sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL || cond_len == 0 || cond_len > row.len() {
        return Err(Error::NonNormalizedAttention(total));
    }
    let cond_mass: f64 = row[..cond_len].iter().map(|&w| f64::from(w)).sum();
    let visual_mass = 1.0 - cond_mass;
    let m = row.len() - cond_len;
    Ok(Allocation {
        cond_mass,
        visual_mass,
        cond_mean: cond_mass / cond_len as f64,
        visual_mean: if m == 0 { 0.0 } else { visual_mass / m as f64 },
    })
}

/// Indexing helpers over one trace.
struct View<'t> {
    trace: &'t DecodeTrace,
    heads: usize,
    kv_heads: usize,
    group: usize,
    cond_len: usize,
    w: usize,
}

impl<'t> View<'t> {
    fn new(trace: &'t DecodeTrace) -> Result<Self> {
        if !trace.has_attention() {
            return Err(Error::TraceMissingAttention);
        }
        let c = trace.config();
        Ok(Self {
            trace,
            heads: c.heads,
            kv_heads: c.kv_heads,
            group: c.heads / c.kv_heads,
            cond_len: c.cond_len,
            w: c.grid.w,
        })
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        let c = self.trace.config();
        if layer >= c.layers || head >= c.heads {
            return Err(Error::LineOutOfRange(format!(
                "layer {layer} / head {head} outside {}x{}",
                c.layers, c.heads
            )));
        }
        Ok(())
    }

    /// `(visual key positions, weights over [cond, visual])` for a step.
    fn row<'s>(&self, step: &'s StepRecord, layer: usize, head: usize) -> (&'s [usize], &'s [f32]) {
        let a = step.attention.as_ref().expect("checked in View::new");
        let kv = layer * self.kv_heads + head / self.group;
        (&a.key_positions[kv], &a.weights[layer * self.heads + head])
    }
}

/// One row per (step, layer, query head).
#[derive(Debug, Clone, Serialize)]
pub struct AllocationRow {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    #[serde(flatten)]
    pub alloc: Allocation,
}

pub fn allocation_series(trace: &DecodeTrace) -> Result<Vec<AllocationRow>> {
    let v = View::new(trace)?;
    let mut out = Vec::new();
    for s in &trace.steps {
        for layer in 0..trace.config().layers {
            for head in 0..v.heads {
                let (_, w) = v.row(s, layer, head);
                out.push(AllocationRow {
                    step: s.step,
                    layer,
                    head,
                    alloc: attention_allocation(w, v.cond_len)?,
                });
            }
        }
    }
    Ok(out)
}

/// Mean attention of 1-based `line`'s queries over raster positions
/// `0..prefix`; positions no longer cached contribute zero.
pub fn line_profile(trace: &DecodeTrace, layer: usize, head: usize, line: usize, prefix: usize) -> Result<Vec<f64>> {
    let v = View::new(trace)?;
    v.check_head(layer, head)?;
    let steps: Vec<&StepRecord> = trace.steps.iter().filter(|s| s.line == line).collect();
    if steps.is_empty() {
        return Err(Error::LineOutOfRange(format!("line {line} not in trace")));
    }
    let mut acc = vec![0.0f64; prefix];
    for s in &steps {
        let (positions, weights) = v.row(s, layer, head);
        for (&p, &wgt) in positions.iter().zip(&weights[v.cond_len..]) {
            if p < prefix {
                acc[p] += f64::from(wgt);
            }
        }
    }
    let inv = 1.0 / steps.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity between lines `line` and `line + 1` (1-based) over the
/// entries generated before `line` began.
pub fn interline_similarity(trace: &DecodeTrace, layer: usize, head: usize, line: usize) -> Result<f64> {
    let v = View::new(trace)?;
    let h = trace.config().grid.h;
    if line == 0 || line + 1 > h {
        return Err(Error::LineOutOfRange(format!(
            "need lines {line} and {} within 1..={h}",
            line + 1
        )));
    }
    let prefix = (line - 1) * v.w;
    if prefix == 0 {
        return Err(Error::EmptyCommonPrefix(line));
    }
    let a = line_profile(trace, layer, head, line, prefix)?;
    let b = line_profile(trace, layer, head, line + 1, prefix)?;
    Ok(cosine(&a, &b))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityRow {
    pub layer: usize,
    pub head: usize,
    pub line: usize,
    pub similarity: f64,
}

/// Similarity for every layer, query head and line pair `(l, l + 1)` with a
/// non-empty common prefix.
pub fn similarity_table(trace: &DecodeTrace) -> Result<Vec<SimilarityRow>> {
    View::new(trace)?;
    let c = trace.config();
    let mut rows = Vec::new();
    for layer in 0..c.layers {
        for head in 0..c.heads {
            for line in 2..c.grid.h {
                rows.push(SimilarityRow {
                    layer,
                    head,
                    line,
                    similarity: interline_similarity(trace, layer, head, line)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Visual attention mass bucketed by raster distance, summed over steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalityProfile {
    /// Mass on anchor keys (position `< n_init`), whatever their distance.
    pub anchor_mass: f64,
    /// `by_distance[k]`: mass on non-anchor keys at distance `query - key = k`.
    pub by_distance: Vec<f64>,
    pub total_visual_mass: f64,
    pub steps: usize,
}

pub fn locality_profile(trace: &DecodeTrace, layer: usize, head: usize) -> Result<LocalityProfile> {
    let v = View::new(trace)?;
    v.check_head(layer, head)?;
    let n_init = trace.header.budget.n_init;
    let mut prof = LocalityProfile {
        anchor_mass: 0.0,
        by_distance: vec![0.0; trace.config().grid.n()],
        total_visual_mass: 0.0,
        steps: trace.steps.len(),
    };
    for s in &trace.steps {
        let (positions, weights) = v.row(s, layer, head);
        for (&p, &wgt) in positions.iter().zip(&weights[v.cond_len..]) {
            let wgt = f64::from(wgt);
            prof.total_visual_mass += wgt;
            if p < n_init {
                prof.anchor_mass += wgt;
            } else {
                prof.by_distance[s.position - p] += wgt;
            }
        }
    }
    Ok(prof)
}

pub fn allocation_csv(rows: &[AllocationRow]) -> String {
    let mut out = String::from("step,layer,head,cond_mass,visual_mass,cond_mean,visual_mean\n");
    for r in rows {
        let a = r.alloc;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.layer, r.head, a.cond_mass, a.visual_mass, a.cond_mean, a.visual_mean
        );
    }
    out
}

pub fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut out = format!("layer,head,line,{SIMILARITY_MEASURE}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.layer, r.head, r.line, r.similarity);
    }
    out
}

/// `layer,head,bucket,mass` with bucket `anchor` or the raster distance.
pub fn locality_csv(profiles: &[((usize, usize), LocalityProfile)]) -> String {
    let mut out = String::from("layer,head,bucket,mass\n");
    for ((layer, head), p) in profiles {
        let _ = writeln!(out, "{layer},{head},anchor,{}", p.anchor_mass);
        for (d, m) in p.by_distance.iter().enumerate() {
            if *m > 0.0 {
                let _ = writeln!(out, "{layer},{head},{d},{m}");
            }
        }
    }
    out
}
