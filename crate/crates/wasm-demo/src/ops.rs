//! The demo's operations as plain functions returning JSON strings, so they
//! can be tested natively.

use linear_kv::bench::{flops_proxy, memory_report};
use linear_kv::{run, BudgetConfig, GridSpec, PolicyKind, Rho, RunConfig};
use serde_json::json;

/// Largest grid side the page accepts; keeps a run well under a second.
pub const MAX_SIDE: usize = 32;

fn parse_grid(grid: &str) -> Result<GridSpec, String> {
    let g: GridSpec = grid.trim().parse().map_err(|e: linear_kv::Error| e.to_string())?;
    if g.h > MAX_SIDE || g.w > MAX_SIDE {
        return Err(format!("grid {g} too large for the demo (max {MAX_SIDE}x{MAX_SIDE})"));
    }
    Ok(g)
}

fn parse_rho(rho: &str) -> Result<Rho, String> {
    rho.trim().parse().map_err(|e: linear_kv::Error| e.to_string())
}

fn demo_config(grid: GridSpec, rho: Rho, policy: PolicyKind, seed: u64) -> RunConfig {
    RunConfig {
        grid,
        rho,
        policy,
        layers: 2,
        heads: 2,
        kv_heads: 2,
        dim: 16,
        vocab: 64,
        cond_len: 4,
        seed,
        ..RunConfig::default()
    }
}

/// Resolved budget for a grid and ratio, or the error naming the nearest
/// valid ratios. Always lists every line-aligned ratio `k/h`.
pub fn budget_info(grid: &str, rho: &str) -> Result<String, String> {
    let g = parse_grid(grid)?;
    let r = parse_rho(rho)?;
    let valid: Vec<String> = (1..=g.h as u64)
        .filter_map(|k| Rho::new(k, g.h as u64).ok())
        .filter(|r| BudgetConfig::resolve(&g, *r, None, None).is_ok())
        .map(|r| r.to_string())
        .collect();
    let resolved = BudgetConfig::resolve(&g, r, None, None);
    Ok(match resolved {
        Ok(b) => json!({
            "ok": true,
            "n": g.n(),
            "budget": b.budget,
            "n_init": b.n_init,
            "recent_lines": b.recent_lines,
            "first_compression_line": if b.is_full() { None } else { Some(b.budget_lines(&g)) },
            "valid_rhos": valid,
        }),
        Err(e) => json!({ "ok": false, "error": e.to_string(), "valid_rhos": valid }),
    }
    .to_string())
}

/// Per-step cached entries and attention work for `policy` next to the full
/// cache on the same seed.
pub fn simulate(grid: &str, rho: &str, policy: &str, seed: u64) -> Result<String, String> {
    let g = parse_grid(grid)?;
    let r = parse_rho(rho)?;
    let p: PolicyKind = policy.parse().map_err(|e: linear_kv::Error| e.to_string())?;
    let t = run(&demo_config(g, r, p, seed), false).map_err(|e| e.to_string())?;
    let full = run(&demo_config(g, r, PolicyKind::Full, seed), false).map_err(|e| e.to_string())?;
    let (m, mf) = (memory_report(&t), memory_report(&full));
    let agree = t.footer.tokens.iter().zip(&full.footer.tokens).filter(|(a, b)| a == b).count();
    Ok(json!({
        "policy": p.name(),
        "budget": t.header.budget,
        "eviction_lines": t.eviction_lines(),
        "head_visual": m.per_step.iter().map(|s| s.max_head_visual).collect::<Vec<_>>(),
        "full_head_visual": mf.per_step.iter().map(|s| s.max_head_visual).collect::<Vec<_>>(),
        "flops": flops_proxy(&t),
        "full_flops": flops_proxy(&full),
        "peak_saving": 1.0 - m.peak_entries as f64 / mf.peak_entries as f64,
        "token_agreement": agree as f64 / g.n() as f64,
    })
    .to_string())
}

/// State of every raster position in layer 0, kv head 0 after the end of
/// 1-based `line`: 0 not generated yet, 1 evicted, 2 cached anchor,
/// 3 other cached entry.
pub fn retained_map(grid: &str, rho: &str, policy: &str, seed: u64, line: usize) -> Result<String, String> {
    let g = parse_grid(grid)?;
    let r = parse_rho(rho)?;
    let p: PolicyKind = policy.parse().map_err(|e: linear_kv::Error| e.to_string())?;
    if line == 0 || line > g.h {
        return Err(format!("line {line} outside 1..={}", g.h));
    }
    let t = run(&demo_config(g, r, p, seed), false).map_err(|e| e.to_string())?;
    let n_init = t.header.budget.n_init;
    let mut state: Vec<u8> = (0..g.n())
        .map(|pos| match pos {
            _ if pos >= line * g.w => 0,
            _ if pos < n_init => 2,
            _ => 3,
        })
        .collect();
    for rep in t.evictions().filter(|e| e.line <= line && e.layer == 0 && e.head == 0) {
        for &pos in &rep.evicted_positions {
            state[pos] = 1;
        }
    }
    Ok(json!({ "h": g.h, "w": g.w, "line": line, "n_init": n_init, "state": state }).to_string())
}
