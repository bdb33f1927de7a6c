use linear_kv::config::RunConfig;
use linear_kv::policy::PolicyKind;
use linear_kv::trace::*;
use linear_kv::{run, Error};

fn cfg() -> RunConfig {
    RunConfig {
        grid: "6x4".parse().unwrap(),
        rho: "1/2".parse().unwrap(),
        policy: PolicyKind::Lineattn,
        layers: 1,
        heads: 2,
        kv_heads: 1,
        dim: 4,
        vocab: 16,
        cond_len: 2,
        trace_attention: true,
        ..RunConfig::default()
    }
}

#[test]
fn jsonl_round_trip() {
    let t = run(&cfg(), true).unwrap();
    let text = t.to_jsonl();
    assert_eq!(text.lines().count(), 1 + 24 + 1);
    assert!(text.starts_with(r#"{"type":"header","schema":"linear-kv-trace","version":1"#));
    let back = DecodeTrace::read_jsonl(text.as_bytes()).unwrap();
    assert_eq!(back, t);
    assert!(back.has_timings() && back.has_attention());
}

#[test]
fn header_reproduces_the_run() {
    let t = run(&cfg(), false).unwrap();
    let again = run(t.config(), false).unwrap();
    assert_eq!(again.to_jsonl(), t.to_jsonl());
    assert_eq!(t.header.prng, linear_kv::decoder::PRNG_ALGORITHM);
    assert!(!t.has_timings());
}

#[test]
fn timings_are_the_only_nondeterminism() {
    let a = run(&cfg(), true).unwrap();
    let b = run(&cfg(), true).unwrap();
    assert_eq!(a.body_without_timings(), b.body_without_timings());
    assert!(!a.body_without_timings().contains("step_ns"));
}

#[test]
fn malformed_traces() {
    let t = run(&cfg(), false).unwrap().to_jsonl();
    let no_header: String = t.lines().skip(1).map(|l| format!("{l}\n")).collect();
    assert!(matches!(DecodeTrace::read_jsonl(no_header.as_bytes()), Err(Error::TraceParse(_))));
    let no_footer: String = t.lines().take(3).map(|l| format!("{l}\n")).collect();
    assert!(matches!(DecodeTrace::read_jsonl(no_footer.as_bytes()), Err(Error::TraceParse(_))));
    let other = t.replacen("linear-kv-trace", "something-else", 1);
    assert!(matches!(DecodeTrace::read_jsonl(other.as_bytes()), Err(Error::TraceParse(_))));
    assert!(matches!(DecodeTrace::read_jsonl("{nope\n".as_bytes()), Err(Error::TraceParse(_))));
}

#[test]
fn eviction_reports_ride_on_line_ends() {
    let t = run(&cfg(), false).unwrap();
    for s in &t.steps {
        if !s.evictions.is_empty() {
            assert_eq!((s.position + 1) % 4, 0);
            assert!(s.evictions.iter().all(|r| r.line == s.line && r.evicted_positions.len() == 4));
        }
    }
    assert_eq!(t.eviction_lines(), vec![3, 4, 5]);
}
