use linear_kv::analysis::*;
use linear_kv::config::RunConfig;
use linear_kv::policy::PolicyKind;
use linear_kv::{run, DecodeTrace, Error};

fn traced(policy: PolicyKind, rho: &str) -> DecodeTrace {
    let cfg = RunConfig {
        grid: "6x5".parse().unwrap(),
        rho: rho.parse().unwrap(),
        policy,
        layers: 2,
        heads: 4,
        kv_heads: 2,
        dim: 8,
        vocab: 32,
        cond_len: 3,
        seed: 2,
        trace_attention: true,
        ..RunConfig::default()
    };
    run(&cfg, false).unwrap()
}

#[test]
fn allocation_examples() {
    let a = attention_allocation(&[0.25; 4], 2).unwrap();
    assert_eq!((a.cond_mass, a.visual_mass), (0.5, 0.5));
    assert_eq!((a.cond_mean, a.visual_mean), (0.25, 0.25));
    let b = attention_allocation(&[0.5, 0.5, 0.0], 2).unwrap();
    assert_eq!((b.cond_mass, b.visual_mass), (1.0, 0.0));
    let only_cond = attention_allocation(&[0.5, 0.5], 2).unwrap();
    assert_eq!(only_cond.visual_mean, 0.0);
    assert!(matches!(attention_allocation(&[0.3, 0.3], 1), Err(Error::NonNormalizedAttention(_))));
}

#[test]
fn allocation_matches_direct_sums() {
    let t = traced(PolicyKind::Lineattn, "1/2");
    let rows = allocation_series(&t).unwrap();
    assert_eq!(rows.len(), 30 * 2 * 4);
    for r in &rows {
        let a = t.steps[r.step].attention.as_ref().unwrap();
        let w = &a.weights[r.layer * 4 + r.head];
        let cond: f64 = w[..3].iter().map(|&x| f64::from(x)).sum();
        assert!((r.alloc.cond_mass - cond).abs() < 1e-6);
        assert!((r.alloc.cond_mass + r.alloc.visual_mass - 1.0).abs() < 1e-5);
    }
}

#[test]
fn cosine_properties() {
    assert!((cosine(&[0.2, 0.3], &[0.2, 0.3]) - 1.0).abs() < 1e-12);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    let (a, b) = ([0.1, 0.5, 0.4], [0.3, 0.3, 0.4]);
    assert_eq!(cosine(&a, &b), cosine(&b, &a));
    let scaled: Vec<f64> = a.iter().map(|x| x * 7.0).collect();
    assert!((cosine(&scaled, &b) - cosine(&a, &b)).abs() < 1e-12);
}

#[test]
fn similarity_matches_stored_rows() {
    let t = traced(PolicyKind::Full, "1");
    let w = 5;
    for (layer, head, line) in [(0, 0, 2), (1, 3, 4), (1, 1, 5)] {
        let prefix = (line - 1) * w;
        let avg = |l: usize| {
            let mut acc = vec![0.0f64; prefix];
            for s in t.steps.iter().filter(|s| s.line == l) {
                let a = s.attention.as_ref().unwrap();
                let pos = &a.key_positions[layer * 2 + head / 2];
                for (&p, &x) in pos.iter().zip(&a.weights[layer * 4 + head][3..]) {
                    if p < prefix {
                        acc[p] += f64::from(x) / w as f64;
                    }
                }
            }
            acc
        };
        let want = cosine(&avg(line), &avg(line + 1));
        let got = interline_similarity(&t, layer, head, line).unwrap();
        assert!((got - want).abs() < 1e-6);
        assert!((0.0..=1.0 + 1e-12).contains(&got));
    }
    let table = similarity_table(&t).unwrap();
    assert_eq!(table.len(), 2 * 4 * 4);
}

#[test]
fn similarity_errors() {
    let t = traced(PolicyKind::Lineattn, "1/2");
    assert_eq!(interline_similarity(&t, 0, 0, 1), Err(Error::EmptyCommonPrefix(1)));
    assert!(matches!(interline_similarity(&t, 0, 0, 6), Err(Error::LineOutOfRange(_))));
    assert!(matches!(interline_similarity(&t, 0, 9, 2), Err(Error::LineOutOfRange(_))));
    let mut plain = t.clone();
    for s in &mut plain.steps {
        s.attention = None;
    }
    assert_eq!(interline_similarity(&plain, 0, 0, 2), Err(Error::TraceMissingAttention));
    assert_eq!(locality_profile(&plain, 0, 0), Err(Error::TraceMissingAttention));
    assert!(allocation_series(&plain).is_err());
}

#[test]
fn locality_partitions_visual_mass() {
    let t = traced(PolicyKind::Lineattn, "1/2");
    let n_init = t.header.budget.n_init;
    for layer in 0..2 {
        for head in 0..4 {
            let p = locality_profile(&t, layer, head).unwrap();
            let sum = p.anchor_mass + p.by_distance.iter().sum::<f64>();
            assert!((sum - p.total_visual_mass).abs() < 1e-5);
            // direct bucketing
            let mut anchor = 0.0;
            let mut dist = vec![0.0; 30];
            for s in &t.steps {
                let a = s.attention.as_ref().unwrap();
                let pos = &a.key_positions[layer * 2 + head / 2];
                for (&k, &x) in pos.iter().zip(&a.weights[layer * 4 + head][3..]) {
                    if k < n_init {
                        anchor += f64::from(x);
                    } else {
                        dist[s.position - k] += f64::from(x);
                    }
                }
            }
            assert!((p.anchor_mass - anchor).abs() < 1e-9);
            for (a, b) in p.by_distance.iter().zip(&dist) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn csv_shapes() {
    let t = traced(PolicyKind::Lineattn, "1/2");
    let sims = similarity_csv(&similarity_table(&t).unwrap());
    assert!(sims.starts_with("layer,head,line,cosine\n"));
    let alloc = allocation_csv(&allocation_series(&t).unwrap());
    assert_eq!(alloc.lines().count(), 1 + 30 * 8);
    let prof = locality_profile(&t, 0, 0).unwrap();
    let loc = locality_csv(&[((0, 0), prof)]);
    assert!(loc.lines().nth(1).unwrap().starts_with("0,0,anchor,"));
}
