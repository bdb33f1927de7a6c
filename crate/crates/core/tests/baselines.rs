use linear_kv::baselines::*;
use linear_kv::grid::{BudgetConfig, GridSpec, Rho};

#[test]
fn random_edges() {
    let mid: Vec<usize> = (10..20).collect();
    assert_eq!(random_evict(&mid, 10, 1).unwrap(), mid);
    assert!(random_evict(&mid, 0, 1).unwrap().is_empty());
    assert_eq!(random_evict(&mid, 11, 1).unwrap_err().code(), "insufficient-mid-tokens");
}

#[test]
fn random_is_seed_deterministic() {
    let mid: Vec<usize> = (0..20).collect();
    let a = random_evict(&mid, 8, 42).unwrap();
    let b = random_evict(&mid, 8, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    let others: Vec<Vec<usize>> = (0..10).map(|s| random_evict(&mid, 8, s).unwrap()).collect();
    assert!(others.iter().any(|o| *o != a));
}

#[test]
fn streaming_window_arithmetic() {
    let spec = GridSpec::square(8).unwrap();
    let cfg = BudgetConfig::resolve(&spec, "3/8".parse().unwrap(), Some(8), Some(1)).unwrap();
    // before the budget is reached nothing is dropped
    assert_eq!(streaming_retain(&cfg, &spec, 2), (0..16).collect::<Vec<_>>());
    // end of line 3: keep sink plus B - w - n_init = 8 most recent
    let expected: Vec<usize> = (0..8).chain(16..24).collect();
    assert_eq!(streaming_retain(&cfg, &spec, 3), expected);
    // once line 4 is appended the cache is sink plus the last 16
    let after_line4: Vec<usize> = streaming_retain(&cfg, &spec, 3)
        .into_iter()
        .chain(24..32)
        .collect();
    assert_eq!(after_line4, (0..8).chain(16..32).collect::<Vec<_>>());
    let expected: Vec<usize> = (0..8).chain(48..56).collect();
    assert_eq!(streaming_retain(&cfg, &spec, 7), expected);
}

#[test]
fn streaming_degenerate_cases() {
    let spec = GridSpec::square(8).unwrap();
    let cfg = BudgetConfig {
        rho: "3/8".parse().unwrap(),
        budget: 24,
        n_init: 24,
        recent_lines: 1,
    };
    assert_eq!(streaming_retain(&cfg, &spec, 5), (0..24).collect::<Vec<_>>());
    let full = BudgetConfig::resolve(&spec, Rho::one(), None, None).unwrap();
    assert_eq!(streaming_retain(&full, &spec, 8), (0..64).collect::<Vec<_>>());
}

#[test]
fn h2o_prefers_oldest_on_ties_and_zero_mass() {
    let history = vec![1.0; 12];
    let mid: Vec<usize> = (2..12).collect();
    assert_eq!(h2o_evict(&history, &mid, 3).unwrap(), vec![2, 3, 4]);
    let mut history = vec![0.5; 12];
    history[9] = 0.0;
    assert!(h2o_evict(&history, &mid, 1).unwrap().contains(&9));
}
