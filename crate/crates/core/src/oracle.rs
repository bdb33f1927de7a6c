//! Brute-force reference computations and the equivalence suites behind the
//! `oracle` subcommand.
//!
//! The references are deliberately naive: f64 double loops, full sorts and
//! set filters, sharing nothing with the fast paths except input types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention, default_scale, RowMatrix};
use crate::config::RunConfig;
use crate::decoder::{cond_tokens_for_seed, reference_generate, ToyModel};
use crate::grid::{BudgetConfig, GridSpec};
use crate::policy::{bottom_k, saliency, PolicyKind, SaliencyVector};
use crate::trace::{run, DecodeTrace};

/// `softmax(q K^T scale) V` by explicit loops in f64.
pub fn naive_attention(q: &[f32], k: &RowMatrix, v: &RowMatrix, scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..k.rows())
        .map(|j| {
            let mut s = 0.0;
            for (c, &qc) in q.iter().enumerate().take(k.cols()) {
                s += f64::from(qc) * f64::from(k.get(j, c));
            }
            s * scale
        })
        .collect();
    let w = naive_softmax(&logits);
    let mut out = vec![0.0; v.cols()];
    for (j, wj) in w.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += wj * f64::from(v.get(j, c));
        }
    }
    out
}

pub fn naive_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Per-query softmax over the keys, then the average over queries.
pub fn naive_saliency(guide: &RowMatrix, keys: &RowMatrix) -> Vec<f64> {
    let scale = 1.0 / (keys.cols() as f64).sqrt();
    let mut acc = vec![0.0; keys.rows()];
    for i in 0..guide.rows() {
        let logits: Vec<f64> = (0..keys.rows())
            .map(|j| {
                let mut s = 0.0;
                for c in 0..keys.cols() {
                    s += f64::from(guide.get(i, c)) * f64::from(keys.get(j, c));
                }
                s * scale
            })
            .collect();
        for (a, p) in acc.iter_mut().zip(naive_softmax(&logits)) {
            *a += p;
        }
    }
    acc.iter().map(|a| a / guide.rows() as f64).collect()
}

/// Full stable sort by score then index; the first `k`, ascending.
pub fn sort_bottom_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort();
    out
}

/// Sink + window survivors after the line end at `line`, by filtering every
/// generated position.
pub fn closed_form_streaming(cfg: &BudgetConfig, spec: &GridSpec, line: usize) -> Vec<usize> {
    let generated = line * spec.w;
    let keep_from = if generated < cfg.budget {
        0
    } else {
        generated + spec.w + cfg.n_init - cfg.budget
    };
    (0..generated).filter(|&p| p < cfg.n_init || p >= keep_from).collect()
}

/// Accumulated attention per raster position, re-summed from a trace's
/// stored attention rows over steps `0..=upto`, for one `(layer, kv-head)`.
pub fn resummed_history(trace: &DecodeTrace, layer: usize, kv_head: usize, upto: usize) -> Vec<f64> {
    let c = trace.config();
    let group = c.heads / c.kv_heads;
    let mut mass = vec![0.0; c.grid.n()];
    for s in &trace.steps[..=upto] {
        let a = s.attention.as_ref().expect("attention recorded");
        let positions = &a.key_positions[layer * c.kv_heads + kv_head];
        for qh in kv_head * group..(kv_head + 1) * group {
            let row = &a.weights[layer * c.heads + qh][c.cond_len..];
            for (&p, &w) in positions.iter().zip(row) {
                mass[p] += f64::from(w);
            }
        }
    }
    mass
}

/// Budget invariants over one trace: per-head visual length never above `B`
/// and exactly `B - w` after every compression. Returns the violations.
pub fn budget_violations(trace: &DecodeTrace) -> Vec<String> {
    let b = trace.header.budget;
    let w = trace.config().grid.w;
    let mut out = Vec::new();
    for s in &trace.steps {
        if !b.is_full() && s.visual_lens.iter().any(|&l| l > b.budget) {
            out.push(format!("step {}: head above budget {:?}", s.step, s.visual_lens));
        }
        if let Some(post) = &s.post_compress_lens {
            if post.iter().any(|&l| l != b.budget - w) {
                out.push(format!("step {}: post-compression lengths {post:?}", s.step));
            }
        }
    }
    out
}

/// Evictions that touched an anchor (`< n_init`) or the recent window
/// (the last `r` lines at the event), plus steps whose attention rows lost
/// conditional entries (the latter needs attention tracing).
pub fn protected_violations(trace: &DecodeTrace) -> Vec<String> {
    let b = trace.header.budget;
    let c = trace.config();
    let w = c.grid.w;
    let mut out = Vec::new();
    for r in trace.evictions() {
        let rec_start = r.line.saturating_sub(b.recent_lines) * w;
        for &p in &r.evicted_positions {
            if p < b.n_init || p >= rec_start {
                out.push(format!(
                    "line {} layer {} head {}: evicted protected position {p}",
                    r.line, r.layer, r.head
                ));
            }
        }
    }
    for s in &trace.steps {
        if let Some(a) = &s.attention {
            let group = c.heads / c.kv_heads;
            for (i, row) in a.weights.iter().enumerate() {
                let kv = (i / c.heads) * c.kv_heads + (i % c.heads) / group;
                if row.len() != c.cond_len + a.key_positions[kv].len() {
                    out.push(format!("step {}: conditional entries missing", s.step));
                }
            }
        }
    }
    out
}

/// Outcome of one oracle suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RowMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    RowMatrix::new(rows, cols, data).expect("finite")
}

pub fn attention_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..cases {
        let d = rng.gen_range(1..=32);
        let m = rng.gen_range(1..=64);
        let q = random_matrix(&mut rng, 1, d);
        let k = random_matrix(&mut rng, m, d);
        let v = random_matrix(&mut rng, m, d);
        let got = attention(&q, &k, &v, default_scale(d)).expect("valid shapes");
        let want = naive_attention(q.row(0), &k, &v, 1.0 / (d as f64).sqrt());
        let err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (f64::from(*a) - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        failures += usize::from(err > 1e-6);
    }
    SuiteResult {
        name: "attention-vs-double-loop",
        cases,
        failures,
        detail: format!("max abs err {worst:.3e} (tol 1e-6)"),
    }
}

pub fn saliency_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..cases {
        let w = rng.gen_range(1..=16);
        let m = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=32);
        let guide = random_matrix(&mut rng, w, d);
        let keys = random_matrix(&mut rng, m, d);
        let got = saliency(&guide, &keys).expect("non-empty");
        let want = naive_saliency(&guide, &keys);
        let err = got
            .scores
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        failures += usize::from(err > 1e-6);
    }
    SuiteResult {
        name: "saliency-vs-double-loop",
        cases,
        failures,
        detail: format!("max abs err {worst:.3e} (tol 1e-6)"),
    }
}

/// Random score vectors, a third of them drawn from a handful of values so
/// ties are common.
pub fn bottom_k_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for case in 0..cases {
        let m = rng.gen_range(1..=64);
        let k = rng.gen_range(0..=m);
        let scores: Vec<f64> = match case % 3 {
            0 => (0..m).map(|_| f64::from(rng.gen_range(0..3u8)) / 4.0).collect(),
            1 => vec![0.5; m],
            _ => (0..m).map(|_| rng.gen::<f64>()).collect(),
        };
        let got = bottom_k(&SaliencyVector { scores: scores.clone() }, k).expect("k <= m");
        failures += usize::from(got != sort_bottom_k(&scores, k));
    }
    SuiteResult {
        name: "bottom-k-vs-full-sort",
        cases,
        failures,
        detail: "exact set equality incl. tie-break".into(),
    }
}

/// Decoder streaming runs against the closed-form sink + window set.
pub fn streaming_suite(seeds: u64) -> SuiteResult {
    let mut failures = 0;
    let mut cases = 0;
    for seed in 0..seeds {
        let cfg = RunConfig {
            grid: GridSpec { h: 8, w: 8 },
            rho: "1/2".parse().expect("valid"),
            policy: PolicyKind::Streaming,
            layers: 2,
            heads: 2,
            kv_heads: 2,
            dim: 8,
            vocab: 32,
            cond_len: 3,
            seed,
            ..RunConfig::default()
        };
        let trace = run(&cfg, false).expect("valid config");
        let budget = trace.header.budget;
        let mut cache: Vec<Vec<usize>> = vec![Vec::new(); cfg.layers * cfg.kv_heads];
        for s in &trace.steps {
            for c in &mut cache {
                c.push(s.position);
            }
            for r in &s.evictions {
                let c = &mut cache[r.layer * cfg.kv_heads + r.head];
                c.retain(|p| !r.evicted_positions.contains(p));
                cases += 1;
                failures += usize::from(*c != closed_form_streaming(&budget, &cfg.grid, r.line));
            }
        }
    }
    SuiteResult {
        name: "streaming-closed-form",
        cases,
        failures,
        detail: "replayed cache == sink + window".into(),
    }
}

/// Ratio-one guided policy against the cache-free reference decoder.
pub fn full_cache_suite(seeds: u64) -> SuiteResult {
    let sizes = [(1, 1, 1, 8), (2, 2, 1, 8), (2, 4, 2, 16)];
    let grid = GridSpec { h: 5, w: 5 };
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &(layers, heads, kv_heads, dim) in &sizes {
        for seed in 0..seeds {
            let cfg = RunConfig {
                grid,
                rho: "1".parse().expect("valid"),
                policy: PolicyKind::Lineattn,
                layers,
                heads,
                kv_heads,
                dim,
                vocab: 64,
                cond_len: 4,
                seed,
                ..RunConfig::default()
            };
            let trace = run(&cfg, false).expect("valid config");
            let model = ToyModel::new(cfg.model_config()).expect("valid model");
            let cond = cond_tokens_for_seed(seed, cfg.cond_len, cfg.vocab);
            let (tokens, hidden) = reference_generate(&model, &cond, grid.n()).expect("reference");
            let err = hidden
                .iter()
                .zip(&trace.footer.final_hidden)
                .map(|(a, b)| f64::from((a - b).abs()))
                .fold(0.0, f64::max);
            worst = worst.max(err);
            cases += 1;
            failures += usize::from(tokens != trace.footer.tokens || err > 1e-6);
        }
    }
    SuiteResult {
        name: "full-cache-equivalence",
        cases,
        failures,
        detail: format!("identical tokens, max hidden diff {worst:.3e} (tol 1e-6)"),
    }
}

/// Every suite at the sizes the CLI uses.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        attention_suite(1000, seed),
        saliency_suite(1000, seed.wrapping_add(1)),
        bottom_k_suite(1000, seed.wrapping_add(2)),
        streaming_suite(10),
        full_cache_suite(20),
    ]
}
