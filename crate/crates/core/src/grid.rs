//! 2D view of the visual KV cache.
//!
//! Visual tokens are generated in raster order over an `h x w` latent grid.
//! The cache is managed one raster line (`w` tokens) at a time: budgets are
//! whole lines, evictions happen at line ends, and every cached entry keeps
//! its original raster position so the 2D layout survives compaction.
//!
//! Line numbers are 1-based (line `l` covers raster positions
//! `(l-1)*w .. l*w`); raster positions and store indices are 0-based.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid of `h` raster lines, `w` tokens per line. Serialises as `"HxW"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
}

impl GridSpec {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidGrid(format!("{h}x{w}")));
        }
        Ok(Self { h, w })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    /// Total visual tokens `N = h * w`.
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn line_of(&self, position: usize) -> Result<usize> {
        line_of(self, position)
    }

    /// Raster positions covered by 1-based line `line`.
    pub fn line_positions(&self, line: usize) -> std::ops::Range<usize> {
        (line - 1) * self.w..line * self.w
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::InvalidGrid(format!("expected HxW, got {s:?}")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidGrid(format!("expected HxW, got {s:?}")))
        };
        Self::new(parse(h)?, parse(w)?)
    }
}

impl Serialize for GridSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GridSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 0-based raster line index of `position` (`floor(position / w)`).
pub fn line_of(spec: &GridSpec, position: usize) -> Result<usize> {
    if position >= spec.n() {
        return Err(Error::PositionOutOfGrid {
            position,
            n: spec.n(),
        });
    }
    Ok(position / spec.w)
}

/// Budget ratio in `(0, 1]`, kept as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rho(Ratio<u64>);

impl Rho {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::InvalidRho(format!("{num}/{den}")));
        }
        let r = Ratio::new(num, den);
        if r == Ratio::from_integer(0) || r > Ratio::from_integer(1) {
            return Err(Error::InvalidRho(format!(
                "{num}/{den} is outside (0, 1]"
            )));
        }
        Ok(Self(r))
    }

    pub fn one() -> Self {
        Self(Ratio::from_integer(1))
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn is_one(&self) -> bool {
        self.0 == Ratio::from_integer(1)
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl FromStr for Rho {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidRho(format!("expected a/b, got {s:?}"));
        let (num, den) = match s.trim().split_once('/') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (s.trim(), "1"),
        };
        let num = num.parse::<u64>().map_err(|_| bad())?;
        let den = den.parse::<u64>().map_err(|_| bad())?;
        Self::new(num, den)
    }
}

impl Serialize for Rho {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rho {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Budget arithmetic for one grid: `B = rho * N`, anchor size, recent window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub rho: Rho,
    /// Hard cap `B` on cached visual entries per head.
    pub budget: usize,
    /// Anchor tokens: raster positions `< n_init` are never evicted.
    pub n_init: usize,
    /// Recent lines kept verbatim at each compression.
    pub recent_lines: usize,
}

pub const DEFAULT_RECENT_LINES: usize = 2;

/// `B = rho * N` with default anchor (one full line) and recent window.
pub fn budget_from_ratio(spec: &GridSpec, rho: Rho) -> Result<BudgetConfig> {
    BudgetConfig::resolve(spec, rho, None, None)
}

fn line_aligned_budget(spec: &GridSpec, rho: Rho) -> Result<usize> {
    let exact = Ratio::from_integer(spec.n() as u64) * rho.0;
    let aligned = exact.is_integer() && (exact.to_integer() as usize).is_multiple_of(spec.w);
    if aligned {
        return Ok(exact.to_integer() as usize);
    }
    // Valid ratios are k/h for k = 1..=h.
    let h = spec.h as u64;
    let scaled = rho.0 * Ratio::from_integer(h);
    let lo = scaled.floor().to_integer();
    let hi = scaled.ceil().to_integer();
    let mut nearest = Vec::new();
    for k in [lo, hi] {
        if (1..=h).contains(&k) {
            let r = Ratio::new(k, h);
            let s = format!("{}/{}", r.numer(), r.denom());
            if !nearest.contains(&s) {
                nearest.push(s);
            }
        }
    }
    Err(Error::BudgetNotLineAligned {
        rho: rho.to_string(),
        h: spec.h,
        w: spec.w,
        budget_num: *exact.numer(),
        budget_den: *exact.denom(),
        nearest: nearest.join(", "),
    })
}

impl BudgetConfig {
    /// Resolves a budget with optional overrides.
    ///
    /// `n_init` defaults to one full line. `recent_lines` defaults to 2,
    /// falling back to 1 when the budget cannot hold two recent lines plus a
    /// line of evictable mid tokens. Explicit values are validated as given.
    pub fn resolve(
        spec: &GridSpec,
        rho: Rho,
        n_init: Option<usize>,
        recent_lines: Option<usize>,
    ) -> Result<Self> {
        let budget = line_aligned_budget(spec, rho)?;
        let n_init = n_init.unwrap_or(spec.w);
        if n_init == 0 {
            return Err(Error::InvalidBudget("n_init must be >= 1".into()));
        }
        let recent_lines = match recent_lines {
            Some(0) => return Err(Error::InvalidBudget("recent lines must be >= 1".into())),
            Some(r) => r,
            None if rho.is_one() => DEFAULT_RECENT_LINES,
            None => (1..=DEFAULT_RECENT_LINES)
                .rev()
                .find(|&r| budget >= n_init + (r + 1) * spec.w)
                .unwrap_or(1),
        };
        let cfg = Self {
            rho,
            budget,
            n_init,
            recent_lines,
        };
        cfg.check_capacity(spec)?;
        Ok(cfg)
    }

    /// Like [`BudgetConfig::resolve`] but allows `n_init = 0` and
    /// `recent_lines = 0`, for component-removal ablations.
    pub fn ablated(spec: &GridSpec, rho: Rho, n_init: usize, recent_lines: usize) -> Result<Self> {
        let cfg = Self {
            rho,
            budget: line_aligned_budget(spec, rho)?,
            n_init,
            recent_lines,
        };
        cfg.check_capacity(spec)?;
        Ok(cfg)
    }

    /// At a line end the cache holds `B` entries; anchors and recent lines
    /// must leave at least `w` mid tokens to evict.
    fn check_capacity(&self, spec: &GridSpec) -> Result<()> {
        if self.is_full() {
            return Ok(());
        }
        if self.budget < self.n_init + (self.recent_lines + 1) * spec.w {
            return Err(Error::BudgetTooSmall {
                budget: self.budget,
                n_init: self.n_init,
                recent_lines: self.recent_lines,
                w: spec.w,
            });
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.rho.is_one()
    }

    /// Number of lines that fit in the budget; compression first fires at
    /// the end of this (1-based) line.
    pub fn budget_lines(&self, spec: &GridSpec) -> usize {
        self.budget / spec.w
    }
}

/// One `(layer, kv-head)` slice of the visual cache.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadStore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<usize>,
}

impl HeadStore {
    fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Flat row-major `len x dim` key block.
    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn key(&self, index: usize) -> &[f32] {
        &self.keys[index * self.dim..(index + 1) * self.dim]
    }

    /// Gathers the listed rows of the key block.
    pub fn gather_keys(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.key(i));
        }
        out
    }

    fn push(&mut self, k: &[f32], v: &[f32], position: usize) -> Result<()> {
        if k.len() != self.dim || v.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "k/v of length {}/{} for head dim {}",
                k.len(),
                v.len(),
                self.dim
            )));
        }
        if let Some(&last) = self.positions.last() {
            if position <= last {
                return Err(Error::PositionRegression { position, last });
            }
        }
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        self.positions.push(position);
        Ok(())
    }

    /// Removes the entries flagged in `evict` (one flag per entry), keeping
    /// survivors in order.
    fn retain_unflagged(&mut self, evict: &[bool]) {
        let d = self.dim;
        let mut dst = 0;
        for (src, &drop) in evict.iter().enumerate().take(self.positions.len()) {
            if drop {
                continue;
            }
            if dst != src {
                self.positions[dst] = self.positions[src];
                self.keys.copy_within(src * d..(src + 1) * d, dst * d);
                self.values.copy_within(src * d..(src + 1) * d, dst * d);
            }
            dst += 1;
        }
        self.positions.truncate(dst);
        self.keys.truncate(dst * d);
        self.values.truncate(dst * d);
    }
}

/// Immutable conditional prefix for one `(layer, kv-head)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionalBlock {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Per-layer, per-kv-head compacted visual KV store plus the conditional
/// prefix. Heads are ragged: each keeps its own eviction history.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualKvCache {
    layers: usize,
    kv_heads: usize,
    dim: usize,
    cond_len: usize,
    cond: Vec<ConditionalBlock>,
    heads: Vec<HeadStore>,
}

impl VisualKvCache {
    /// Empty cache with no conditional prefix.
    pub fn new(layers: usize, kv_heads: usize, dim: usize) -> Self {
        Self {
            layers,
            kv_heads,
            dim,
            cond_len: 0,
            cond: vec![ConditionalBlock::default(); layers * kv_heads],
            heads: (0..layers * kv_heads).map(|_| HeadStore::with_dim(dim)).collect(),
        }
    }

    /// Cache seeded with the conditional prefix, one block per
    /// `(layer, kv-head)` in layer-major order. Blocks are fixed from here on.
    pub fn with_conditional(
        layers: usize,
        kv_heads: usize,
        dim: usize,
        cond: Vec<ConditionalBlock>,
    ) -> Result<Self> {
        if cond.len() != layers * kv_heads {
            return Err(Error::ShapeMismatch(format!(
                "{} conditional blocks for {layers} layers x {kv_heads} kv heads",
                cond.len()
            )));
        }
        let cond_len = cond.first().map_or(0, |b| b.keys.len() / dim.max(1));
        for b in &cond {
            if b.keys.len() != cond_len * dim || b.values.len() != cond_len * dim {
                return Err(Error::ShapeMismatch("ragged conditional blocks".into()));
            }
        }
        Ok(Self {
            cond,
            cond_len,
            ..Self::new(layers, kv_heads, dim)
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_len(&self) -> usize {
        self.cond_len
    }

    fn slot(&self, layer: usize, head: usize) -> usize {
        assert!(layer < self.layers && head < self.kv_heads, "head ({layer}, {head}) out of range");
        layer * self.kv_heads + head
    }

    pub fn conditional(&self, layer: usize, head: usize) -> &ConditionalBlock {
        &self.cond[self.slot(layer, head)]
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadStore {
        &self.heads[self.slot(layer, head)]
    }

    /// Visual entries held by one head.
    pub fn len(&self, layer: usize, head: usize) -> usize {
        self.head(layer, head).len()
    }

    /// Visual lengths of every head, layer-major.
    pub fn visual_lens(&self) -> Vec<usize> {
        self.heads.iter().map(HeadStore::len).collect()
    }

    /// Conditional plus visual entries across all layers and kv heads.
    pub fn total_entries(&self) -> usize {
        self.heads.iter().map(|h| h.len() + self.cond_len).sum()
    }

    pub fn append_token(
        &mut self,
        layer: usize,
        head: usize,
        k: &[f32],
        v: &[f32],
        position: usize,
    ) -> Result<()> {
        let slot = self.slot(layer, head);
        self.heads[slot].push(k, v, position)
    }

    /// Splits one head's store into anchor / mid / recent regions at the end
    /// of 1-based line `line`.
    pub fn partition(
        &self,
        layer: usize,
        head: usize,
        spec: &GridSpec,
        cfg: &BudgetConfig,
        line: usize,
    ) -> Result<RegionPartition> {
        if cfg.is_full() || line < cfg.budget_lines(spec) {
            return Err(Error::CompressionNotActive { line });
        }
        Ok(RegionPartition::of(self.head(layer, head).positions(), spec, cfg, line))
    }

    /// Physically removes `evict_idx` (store indices) from one head.
    /// Every index must lie in `partition.mid`. Returns the evicted raster
    /// positions in ascending order.
    pub fn compact(
        &mut self,
        layer: usize,
        head: usize,
        evict_idx: &[usize],
        partition: &RegionPartition,
    ) -> Result<Vec<usize>> {
        let slot = self.slot(layer, head);
        let store = &mut self.heads[slot];
        let mut flags = vec![false; store.len()];
        let mut is_mid = vec![false; store.len()];
        for &i in &partition.mid {
            is_mid[i] = true;
        }
        for &i in evict_idx {
            if i >= store.len() || !is_mid[i] {
                return Err(Error::ProtectedRegionEviction {
                    index: i,
                    position: store.positions.get(i).copied().unwrap_or(usize::MAX),
                });
            }
            flags[i] = true;
        }
        let evicted: Vec<usize> = flags
            .iter()
            .zip(&store.positions)
            .filter_map(|(&f, &p)| f.then_some(p))
            .collect();
        store.retain_unflagged(&flags);
        Ok(evicted)
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            cond_len: self.cond_len,
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(slot, h)| HeadSnapshot {
                    layer: slot / self.kv_heads,
                    head: slot % self.kv_heads,
                    len: h.len(),
                    positions: h.positions.clone(),
                })
                .collect(),
        }
    }
}

/// Store indices of one head split into anchor / mid / recent regions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RegionPartition {
    pub init: Vec<usize>,
    pub mid: Vec<usize>,
    pub rec: Vec<usize>,
}

impl RegionPartition {
    /// Anchor: position `< n_init`. Recent: position in lines
    /// `line - r + 1 ..= line`. Mid: everything else.
    pub fn of(positions: &[usize], spec: &GridSpec, cfg: &BudgetConfig, line: usize) -> Self {
        let rec_start = line.saturating_sub(cfg.recent_lines) * spec.w;
        let mut part = Self::default();
        for (i, &p) in positions.iter().enumerate() {
            if p < cfg.n_init {
                part.init.push(i);
            } else if p >= rec_start {
                part.rec.push(i);
            } else {
                part.mid.push(i);
            }
        }
        part
    }

    pub fn len(&self) -> usize {
        self.init.len() + self.mid.len() + self.rec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// JSON view of a cache: conditional length plus per-head positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub cond_len: usize,
    pub heads: Vec<HeadSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSnapshot {
    pub layer: usize,
    pub head: usize,
    pub len: usize,
    pub positions: Vec<usize>,
}
