//! Line-granular progressive compression.
//!
//! Once a line end finds a head holding `B` visual entries, the head is split
//! into anchor / mid / recent regions and exactly `w` mid tokens are evicted,
//! leaving `B - w` entries: room for the next line. Mid tokens are ranked by
//! the mean attention they receive from the queries of the line that just
//! finished (the guide queue), with the softmax taken over mid keys only.

use serde::{Deserialize, Serialize};

use crate::attention::{default_scale, scaled_logits, softmax_in_place, RowMatrix};
use crate::baselines::{random_evict, streaming_retain};
use crate::error::{Error, Result};
use crate::grid::{BudgetConfig, GridSpec, HeadStore, RegionPartition, VisualKvCache};

/// Queries emitted while generating the current line, per `(layer, kv-head)`.
///
/// With grouped-query attention every query head sharing a kv head
/// contributes its rows, so a full line holds `w * group` rows.
///
/// Each row may carry the scaled logits it produced over the head's visual
/// store at its step. Stores only grow within a line, so a store index seen
/// by a row still names the same entry at the line end.
#[derive(Debug, Clone)]
pub struct GuideQueue {
    dim: usize,
    kv_heads: usize,
    rows: Vec<Vec<f32>>,
    logits: Vec<Vec<f32>>,
    logit_lens: Vec<Vec<usize>>,
}

impl GuideQueue {
    pub fn new(layers: usize, kv_heads: usize, dim: usize) -> Self {
        Self {
            dim,
            kv_heads,
            rows: vec![Vec::new(); layers * kv_heads],
            logits: vec![Vec::new(); layers * kv_heads],
            logit_lens: vec![Vec::new(); layers * kv_heads],
        }
    }

    pub fn push(&mut self, layer: usize, head: usize, q: &[f32]) {
        debug_assert_eq!(q.len(), self.dim);
        self.rows[layer * self.kv_heads + head].extend_from_slice(q);
    }

    /// Pushes `q` with its scaled logits over the visual store.
    pub fn push_with_logits(&mut self, layer: usize, head: usize, q: &[f32], visual_logits: &[f32]) {
        self.push(layer, head, q);
        let i = layer * self.kv_heads + head;
        self.logits[i].extend_from_slice(visual_logits);
        self.logit_lens[i].push(visual_logits.len());
    }

    /// Cached logit rows for one head, if every row carries them and each
    /// covers at least `min_len` store entries.
    fn logit_rows(&self, layer: usize, head: usize, min_len: usize) -> Option<impl Iterator<Item = &[f32]>> {
        let i = layer * self.kv_heads + head;
        let lens = &self.logit_lens[i];
        if lens.len() != self.len(layer, head) || lens.iter().any(|&n| n < min_len) {
            return None;
        }
        let mut rest = self.logits[i].as_slice();
        Some(self.logit_lens[i].iter().map(move |&n| {
            let (row, tail) = rest.split_at(n);
            rest = tail;
            row
        }))
    }

    /// Flat row-major guide matrix for one head.
    pub fn rows(&self, layer: usize, head: usize) -> &[f32] {
        &self.rows[layer * self.kv_heads + head]
    }

    pub fn len(&self, layer: usize, head: usize) -> usize {
        self.rows(layer, head).len() / self.dim
    }

    pub fn clear(&mut self) {
        for r in self.rows.iter_mut().chain(&mut self.logits) {
            r.clear();
        }
        for l in &mut self.logit_lens {
            l.clear();
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Scores aligned with a mid-region index list (raster order). Lower means
/// less useful to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVector {
    pub scores: Vec<f64>,
}

impl SaliencyVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Mean over guide rows of `softmax(q K_mid^T / sqrt(d))`.
pub fn saliency(guide: &RowMatrix, mid_keys: &RowMatrix) -> Result<SaliencyVector> {
    if guide.rows() == 0 {
        return Err(Error::GuideQueueEmpty);
    }
    if mid_keys.rows() == 0 {
        return Err(Error::EmptyMidRegion);
    }
    if guide.cols() != mid_keys.cols() {
        return Err(Error::ShapeMismatch(format!(
            "guide dim {} vs key dim {}",
            guide.cols(),
            mid_keys.cols()
        )));
    }
    Ok(saliency_flat(guide.data(), mid_keys.data(), guide.cols()))
}

/// Unchecked core of [`saliency`] on flat buffers. `guide` and `keys` must
/// both be non-empty multiples of `d`.
pub(crate) fn saliency_flat(guide: &[f32], keys: &[f32], d: usize) -> SaliencyVector {
    let m = keys.len() / d;
    let rows = guide.len() / d;
    let scale = default_scale(d);
    let mut acc = vec![0.0f64; m];
    let mut row = vec![0.0f32; m];
    for q in guide.chunks_exact(d) {
        scaled_logits(q, keys, d, scale, &mut row);
        softmax_in_place(&mut row);
        for (a, &w) in acc.iter_mut().zip(&row) {
            *a += f64::from(w);
        }
    }
    let inv = 1.0 / rows as f64;
    for a in &mut acc {
        *a *= inv;
    }
    SaliencyVector { scores: acc }
}

/// [`saliency_flat`] from logits already computed at each guide step:
/// gathers the mid entries of every row, then softmax and average.
/// Every index in `mid` must be below each row's length.
fn saliency_from_logits<'a>(rows: impl Iterator<Item = &'a [f32]>, mid: &[usize]) -> SaliencyVector {
    let mut acc = vec![0.0f64; mid.len()];
    let mut row = vec![0.0f32; mid.len()];
    let mut n = 0usize;
    for logits in rows {
        for (r, &i) in row.iter_mut().zip(mid) {
            *r = logits[i];
        }
        softmax_in_place(&mut row);
        for (a, &w) in acc.iter_mut().zip(&row) {
            *a += f64::from(w);
        }
        n += 1;
    }
    let inv = 1.0 / n as f64;
    for a in &mut acc {
        *a *= inv;
    }
    SaliencyVector { scores: acc }
}

/// Indices of the `k` lowest scores. Ties go to the smaller index, which in a
/// raster-ordered mid list is the older token. Result is sorted ascending.
pub fn bottom_k(s: &SaliencyVector, k: usize) -> Result<Vec<usize>> {
    if k > s.len() {
        return Err(Error::InsufficientMidTokens {
            needed: k,
            available: s.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..s.len()).collect();
    let key = |&i: &usize| (s.scores[i], i);
    idx.select_nth_unstable_by(k - 1, |a, b| {
        let (sa, ia) = key(a);
        let (sb, ib) = key(b);
        sa.total_cmp(&sb).then(ia.cmp(&ib))
    });
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// True when the line end at 1-based `line` must compress a head of
/// `head_len` visual entries.
pub fn should_compress(cfg: &BudgetConfig, spec: &GridSpec, line: usize, head_len: usize) -> bool {
    !cfg.is_full() && head_len >= cfg.budget && line < spec.h
}

/// Evicted raster positions for one head at one line end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionReport {
    pub line: usize,
    pub layer: usize,
    pub head: usize,
    pub evicted_positions: Vec<usize>,
}

/// Runs partition -> select -> compact on every head. `select` receives the
/// head's store and partition and returns `w` store indices from `mid`.
pub fn compress_with<F>(
    cache: &mut VisualKvCache,
    spec: &GridSpec,
    cfg: &BudgetConfig,
    line: usize,
    mut select: F,
) -> Result<Vec<EvictionReport>>
where
    F: FnMut(usize, usize, &HeadStore, &RegionPartition) -> Result<Vec<usize>>,
{
    let mut reports = Vec::new();
    for layer in 0..cache.layers() {
        for head in 0..cache.kv_heads() {
            if !should_compress(cfg, spec, line, cache.len(layer, head)) {
                continue;
            }
            let part = cache.partition(layer, head, spec, cfg, line)?;
            if part.mid.len() < spec.w {
                return Err(Error::InsufficientMidTokens {
                    needed: spec.w,
                    available: part.mid.len(),
                });
            }
            let evict = select(layer, head, cache.head(layer, head), &part)?;
            let evicted_positions = cache.compact(layer, head, &evict, &part)?;
            reports.push(EvictionReport {
                line,
                layer,
                head,
                evicted_positions,
            });
        }
    }
    Ok(reports)
}

/// Inter-line guided compression at the end of `line`: each head evicts the
/// `w` mid tokens least attended by its guide queue.
pub fn compress_end_of_line(
    cache: &mut VisualKvCache,
    guide: &GuideQueue,
    spec: &GridSpec,
    cfg: &BudgetConfig,
    line: usize,
) -> Result<Vec<EvictionReport>> {
    compress_with(cache, spec, cfg, line, |layer, head, store, part| {
        if guide.len(layer, head) == 0 {
            return Err(Error::GuideQueueEmpty);
        }
        // mid keys that predate the line were scored at every guide step
        let need = part.mid.last().map_or(0, |&i| i + 1);
        let s = match guide.logit_rows(layer, head, need) {
            Some(rows) => saliency_from_logits(rows, &part.mid),
            None => {
                let keys = store.gather_keys(&part.mid);
                saliency_flat(guide.rows(layer, head), &keys, store.dim())
            }
        };
        let picked = bottom_k(&s, spec.w)?;
        Ok(picked.into_iter().map(|i| part.mid[i]).collect())
    })
}

/// Running sum of attention mass each cached visual entry has received since
/// it was appended, aligned with the store of every `(layer, kv-head)`.
#[derive(Debug, Clone)]
pub struct AttentionHistory {
    kv_heads: usize,
    mass: Vec<Vec<f64>>,
}

impl AttentionHistory {
    pub fn new(layers: usize, kv_heads: usize) -> Self {
        Self {
            kv_heads,
            mass: vec![Vec::new(); layers * kv_heads],
        }
    }

    pub fn on_append(&mut self, layer: usize, head: usize) {
        self.mass[layer * self.kv_heads + head].push(0.0);
    }

    /// Adds one query's weights over the head's visual entries.
    pub fn accumulate(&mut self, layer: usize, head: usize, visual_weights: &[f32]) {
        let m = &mut self.mass[layer * self.kv_heads + head];
        debug_assert_eq!(m.len(), visual_weights.len());
        for (a, &w) in m.iter_mut().zip(visual_weights) {
            *a += f64::from(w);
        }
    }

    pub fn mass(&self, layer: usize, head: usize) -> &[f64] {
        &self.mass[layer * self.kv_heads + head]
    }

    /// Drops entries whose store indices are listed (ascending).
    pub fn remove(&mut self, layer: usize, head: usize, indices: &[usize]) {
        let m = &mut self.mass[layer * self.kv_heads + head];
        let mut next = indices.iter().peekable();
        let mut i = 0;
        m.retain(|_| {
            let drop = next.peek().is_some_and(|&&j| j == i);
            if drop {
                next.next();
            }
            i += 1;
            !drop
        });
    }
}

/// Accumulated attention restricted to the mid region.
pub fn attacc_scores(history: &[f64], mid_idx: &[usize]) -> SaliencyVector {
    SaliencyVector {
        scores: mid_idx.iter().map(|&i| history[i]).collect(),
    }
}

/// How mid tokens are chosen for eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    /// Inter-line guided saliency (the default method).
    Saliency,
    /// Bottom-k of accumulated attention since creation.
    Accumulated,
    /// Uniform sample of the mid region.
    Random,
    /// Oldest mid tokens first; the mid region never survives a second line.
    OldestMid,
    /// Sink plus recent window, closed form.
    Streaming,
}

/// Named cache policies selectable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Full,
    Lineattn,
    Random,
    Streaming,
    H2o,
    Attacc,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Full,
        PolicyKind::Lineattn,
        PolicyKind::Random,
        PolicyKind::Streaming,
        PolicyKind::H2o,
        PolicyKind::Attacc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Lineattn => "lineattn",
            PolicyKind::Random => "random",
            PolicyKind::Streaming => "streaming",
            PolicyKind::H2o => "h2o",
            PolicyKind::Attacc => "attacc",
        }
    }

    pub fn selector(&self) -> Option<Selector> {
        match self {
            PolicyKind::Full => None,
            PolicyKind::Lineattn => Some(Selector::Saliency),
            PolicyKind::Random => Some(Selector::Random),
            PolicyKind::Streaming => Some(Selector::Streaming),
            PolicyKind::H2o | PolicyKind::Attacc => Some(Selector::Accumulated),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::UnknownPolicy(s.to_string()))
    }
}

/// Per-stream policy state: selector plus whatever it needs to observe.
#[derive(Debug, Clone)]
pub struct EvictionPolicy {
    selector: Option<Selector>,
    spec: GridSpec,
    cfg: BudgetConfig,
    seed: u64,
    guide: GuideQueue,
    history: Option<AttentionHistory>,
}

impl EvictionPolicy {
    pub fn new(
        selector: Option<Selector>,
        spec: GridSpec,
        cfg: BudgetConfig,
        seed: u64,
        layers: usize,
        kv_heads: usize,
        dim: usize,
    ) -> Self {
        let history = matches!(selector, Some(Selector::Accumulated))
            .then(|| AttentionHistory::new(layers, kv_heads));
        Self {
            selector,
            spec,
            cfg,
            seed,
            guide: GuideQueue::new(layers, kv_heads, dim),
            history,
        }
    }

    pub fn selector(&self) -> Option<Selector> {
        self.selector
    }

    pub fn budget(&self) -> &BudgetConfig {
        &self.cfg
    }

    pub fn needs_guide(&self) -> bool {
        self.selector == Some(Selector::Saliency) && !self.cfg.is_full()
    }

    pub fn needs_history(&self) -> bool {
        self.history.is_some()
    }

    pub fn guide(&self) -> &GuideQueue {
        &self.guide
    }

    pub fn history(&self) -> Option<&AttentionHistory> {
        self.history.as_ref()
    }

    pub fn on_append(&mut self, layer: usize, head: usize) {
        if let Some(h) = &mut self.history {
            h.on_append(layer, head);
        }
    }

    /// Records a query and its scaled logits over the visual store
    /// (before softmax).
    pub fn observe_query(&mut self, layer: usize, head: usize, q: &[f32], visual_logits: &[f32]) {
        if self.needs_guide() {
            self.guide.push_with_logits(layer, head, q, visual_logits);
        }
    }

    pub fn observe_attention(&mut self, layer: usize, head: usize, visual_weights: &[f32]) {
        if let Some(h) = &mut self.history {
            h.accumulate(layer, head, visual_weights);
        }
    }

    /// Line-end hook: compresses when due, then resets the guide queue.
    pub fn end_of_line(&mut self, cache: &mut VisualKvCache, line: usize) -> Result<Vec<EvictionReport>> {
        let reports = match self.selector {
            None => Vec::new(),
            Some(Selector::Saliency) => {
                compress_end_of_line(cache, &self.guide, &self.spec, &self.cfg, line)?
            }
            Some(sel) => {
                let (spec, cfg, seed) = (self.spec, self.cfg, self.seed);
                let history = self.history.as_ref();
                let mut chosen = Vec::new();
                let reports = compress_with(cache, &spec, &cfg, line, |layer, head, store, part| {
                    let w = spec.w;
                    let evict = match sel {
                        Selector::Accumulated => {
                            let h = history.expect("accumulated selector keeps a history");
                            let s = attacc_scores(h.mass(layer, head), &part.mid);
                            bottom_k(&s, w)?.into_iter().map(|i| part.mid[i]).collect()
                        }
                        Selector::Random => {
                            random_evict(&part.mid, w, event_seed(seed, line, layer, head))?
                        }
                        Selector::OldestMid => part.mid[..w].to_vec(),
                        Selector::Streaming => {
                            let keep = streaming_retain(&cfg, &spec, line);
                            store
                                .positions()
                                .iter()
                                .enumerate()
                                .filter(|(_, p)| keep.binary_search(p).is_err())
                                .map(|(i, _)| i)
                                .collect()
                        }
                        Selector::Saliency => unreachable!("handled above"),
                    };
                    chosen.push((layer, head, evict.clone()));
                    Ok(evict)
                })?;
                if let Some(h) = &mut self.history {
                    for (layer, head, idx) in &chosen {
                        h.remove(*layer, *head, idx);
                    }
                }
                reports
            }
        };
        self.guide.clear();
        Ok(reports)
    }
}

/// Per-event seed for the random baseline (splitmix64 over the event key).
pub fn event_seed(seed: u64, line: usize, layer: usize, head: usize) -> u64 {
    let mut x = seed;
    for v in [line as u64, layer as u64, head as u64] {
        x ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = splitmix64(x);
    }
    x
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
