//! Comparison eviction rules. All of them run on the same line-end cadence
//! and budget as the guided policy and share its anchor protection; only the
//! choice of which mid tokens go differs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{BudgetConfig, GridSpec};
use crate::policy::{attacc_scores, bottom_k};

/// `k` distinct entries of `mid_idx`, uniformly sampled, deterministic per
/// seed. Returned in ascending order.
pub fn random_evict(mid_idx: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > mid_idx.len() {
        return Err(Error::InsufficientMidTokens {
            needed: k,
            available: mid_idx.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, mid_idx.len(), k)
        .into_iter()
        .map(|i| mid_idx[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Raster positions a sink + window cache keeps after the line end at
/// 1-based `line`: the first `n_init` positions plus the most recent
/// `B - w - n_init`, so that the next line brings it back up to `B`.
///
/// Depends only on the configuration, never on keys or queries.
pub fn streaming_retain(cfg: &BudgetConfig, spec: &GridSpec, line: usize) -> Vec<usize> {
    let generated = (line * spec.w).min(spec.n());
    if cfg.is_full() || generated < cfg.budget {
        return (0..generated).collect();
    }
    let sink = cfg.n_init.min(generated);
    let window = (cfg.budget - spec.w).saturating_sub(cfg.n_init);
    let window_start = generated.saturating_sub(window).max(sink);
    (0..sink).chain(window_start..generated).collect()
}

/// Heavy-hitter style eviction: bottom-k of accumulated attention inside the
/// mid region. Returns store indices.
pub fn h2o_evict(history: &[f64], mid_idx: &[usize], k: usize) -> Result<Vec<usize>> {
    let s = attacc_scores(history, mid_idx);
    Ok(bottom_k(&s, k)?.into_iter().map(|i| mid_idx[i]).collect())
}
