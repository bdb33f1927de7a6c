use linear_kv::config::RunConfig;
use linear_kv::decoder::*;
use linear_kv::policy::PolicyKind;
use linear_kv::{run, Error};

fn small(grid: &str, rho: &str, policy: PolicyKind) -> RunConfig {
    RunConfig {
        grid: grid.parse().unwrap(),
        rho: rho.parse().unwrap(),
        policy,
        layers: 2,
        heads: 2,
        kv_heads: 2,
        dim: 8,
        vocab: 32,
        cond_len: 3,
        ..RunConfig::default()
    }
}

fn start<'m>(cfg: &RunConfig, model: &'m ToyModel, record: bool) -> Result<DecodeState<'m>, Error> {
    let cond = cond_tokens_for_seed(cfg.seed, cfg.cond_len, cfg.vocab);
    prefill(model, &cond, cfg.grid, cfg.build_policy()?, record)
}

#[test]
fn prefill_shapes() {
    for (c, layers, heads) in [(1, 1, 1), (7, 2, 2)] {
        let cfg = RunConfig {
            cond_len: c,
            layers,
            heads,
            kv_heads: heads,
            ..small("4x4", "1", PolicyKind::Full)
        };
        let model = ToyModel::new(cfg.model_config()).unwrap();
        let state = start(&cfg, &model, false).unwrap();
        assert_eq!(state.position(), 0);
        let cache = state.cache();
        assert_eq!(cache.cond_len(), c);
        for l in 0..layers {
            for h in 0..heads {
                assert_eq!(cache.conditional(l, h).keys.len(), c * cfg.dim);
                assert_eq!(cache.head(l, h).len(), 0);
            }
        }
    }
}

#[test]
fn prefill_is_deterministic_and_rejects_empty_prompt() {
    let cfg = small("4x4", "1", PolicyKind::Full);
    let model = ToyModel::new(cfg.model_config()).unwrap();
    let a = start(&cfg, &model, false).unwrap();
    let model2 = ToyModel::new(cfg.model_config()).unwrap();
    let b = start(&cfg, &model2, false).unwrap();
    assert_eq!(a.cache().conditional(1, 1), b.cache().conditional(1, 1));
    let err = prefill(&model, &[], cfg.grid, cfg.build_policy().unwrap(), false);
    assert!(matches!(err, Err(Error::EmptyCondition)));
}

#[test]
fn decoding_past_the_grid_fails() {
    let cfg = small("2x2", "1", PolicyKind::Full);
    let model = ToyModel::new(cfg.model_config()).unwrap();
    let mut s = start(&cfg, &model, false).unwrap();
    for _ in 0..4 {
        s.decode_step().unwrap();
    }
    assert!(s.is_complete());
    assert_eq!(s.tokens().len(), 4);
    assert_eq!(s.decode_step(), Err(Error::GenerationComplete));
}

#[test]
fn full_cache_matches_reference() {
    for policy in [PolicyKind::Full, PolicyKind::Lineattn] {
        for seed in 0..3 {
            let cfg = RunConfig {
                seed,
                kv_heads: 1,
                ..small("4x5", "1", policy)
            };
            let t = run(&cfg, false).unwrap();
            let model = ToyModel::new(cfg.model_config()).unwrap();
            let (tokens, hidden) = reference_generate(&model, &t.header.cond_tokens, 20).unwrap();
            assert_eq!(tokens, t.footer.tokens);
            assert_eq!(hidden, t.footer.final_hidden);
        }
    }
}

#[test]
fn tiny_full_trace() {
    let t = run(&small("2x2", "1", PolicyKind::Lineattn), false).unwrap();
    assert_eq!(t.steps.len(), 4);
    assert_eq!(t.evictions().count(), 0);
}

#[test]
fn attention_span_follows_budget() {
    let mut cfg = small("8x8", "3/8", PolicyKind::Lineattn);
    cfg.n_init = Some(8);
    cfg.recent_lines = Some(1);
    cfg.trace_attention = true;
    let t = run(&cfg, false).unwrap();
    let (c, b, w) = (cfg.cond_len, 24, 8);
    // the first step sees the conditional prefix plus its own entry
    let first = t.steps[0].attention.as_ref().unwrap();
    assert!(first.weights.iter().all(|r| r.len() == c + 1));
    for s in &t.steps {
        let a = s.attention.as_ref().unwrap();
        for row in &a.weights {
            assert!(row.len() <= c + b);
        }
        if s.line == 5 {
            let k = s.position % w + 1;
            assert!(a.weights.iter().all(|r| r.len() == c + b - w + k));
        }
    }
    assert_eq!(t.eviction_lines(), vec![3, 4, 5, 6, 7]);
}

#[test]
fn grouped_queries_fill_the_guide() {
    let cfg = RunConfig {
        heads: 4,
        kv_heads: 2,
        ..small("6x4", "1/2", PolicyKind::Lineattn)
    };
    let model = ToyModel::new(cfg.model_config()).unwrap();
    let mut s = start(&cfg, &model, false).unwrap();
    for k in 1..=3 {
        s.decode_step().unwrap();
        assert_eq!(s.policy().guide().len(1, 1), 2 * k);
    }
    s.decode_step().unwrap();
    assert_eq!(s.policy().guide().len(1, 1), 0);
}

#[test]
fn runs_are_reproducible() {
    for policy in PolicyKind::ALL {
        let mut cfg = small("6x6", "1/2", policy);
        cfg.seed = 11;
        cfg.trace_attention = true;
        let a = run(&cfg, true).unwrap();
        let b = run(&cfg, true).unwrap();
        assert_eq!(a.body_without_timings(), b.body_without_timings());
    }
}

#[test]
fn invalid_model_configs() {
    let bad = ModelConfig {
        heads: 3,
        kv_heads: 2,
        ..ModelConfig::default()
    };
    assert!(matches!(ToyModel::new(bad), Err(Error::InvalidModelConfig(_))));
    let zero = ModelConfig {
        vocab: 0,
        ..ModelConfig::default()
    };
    assert!(matches!(zero.validate(), Err(Error::InvalidModelConfig(_))));
}

#[test]
fn cond_tokens_are_seeded() {
    let a = cond_tokens_for_seed(3, 8, 50);
    assert_eq!(a, cond_tokens_for_seed(3, 8, 50));
    assert_ne!(a, cond_tokens_for_seed(4, 8, 50));
    assert!(a.iter().all(|&t| t < 50));
}
