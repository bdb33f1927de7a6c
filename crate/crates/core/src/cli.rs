//! Command-line runner: `generate`, `bench`, `analyze`, `oracle`, `ablate`.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 usage or invalid
//! configuration, 3 oracle or invariant failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis;
use crate::bench::{self, STEP_CSV_HEADER};
use crate::config::{load_config, Ablation, PartialConfig, RunConfig};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Rho};
use crate::oracle;
use crate::policy::PolicyKind;
use crate::trace::{run, DecodeTrace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "linear-kv", version, about = "Line-granular KV-cache compression on a toy raster decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode one image and write its trace (JSON Lines).
    Generate(GenerateArgs),
    /// Sweep policies x budget ratios x seeds; write per-step and summary CSVs.
    Bench(BenchArgs),
    /// Attention statistics from a trace recorded with --trace-attention.
    Analyze(AnalyzeArgs),
    /// Run the brute-force equivalence suites.
    Oracle(OracleArgs),
    /// Component ablations: disable-init, disable-rec, disable-mid, attacc.
    Ablate(AblateArgs),
}

/// Grid, budget and model shape shared by the run-producing subcommands.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Latent grid as HxW.
    #[arg(long)]
    pub grid: Option<GridSpec>,
    #[arg(long = "n-init")]
    pub n_init: Option<usize>,
    #[arg(long = "recent-lines")]
    pub recent_lines: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "kv-heads")]
    pub kv_heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long = "cond-len")]
    pub cond_len: Option<usize>,
    /// Output directory.
    #[arg(long, env = "LINEAR_KV_OUT", default_value = "out")]
    pub out: PathBuf,
}

impl ModelArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            grid: self.grid,
            n_init: self.n_init,
            recent_lines: self.recent_lines,
            layers: self.layers,
            heads: self.heads,
            kv_heads: self.kv_heads,
            dim: self.dim,
            vocab: self.vocab,
            cond_len: self.cond_len,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Budget ratio as a/b.
    #[arg(long)]
    pub rho: Option<Rho>,
    /// full | lineattn | random | streaming | h2o | attacc
    #[arg(long)]
    pub policy: Option<PolicyKind>,
    /// disable-init | disable-rec | disable-mid | attacc
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record per-step attention rows (needed by `analyze`).
    #[arg(long = "trace-attention")]
    pub trace_attention: bool,
    /// Leave step_ns out of the trace.
    #[arg(long = "no-timings")]
    pub no_timings: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated budget ratios.
    #[arg(long, value_delimiter = ',', default_value = "1/4")]
    pub rho: Vec<Rho>,
    #[arg(long, value_delimiter = ',', default_value = "full,lineattn,streaming,h2o,random")]
    pub policies: Vec<PolicyKind>,
    /// Number of seeds, starting at --seed-base.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long = "seed-base", default_value_t = 0)]
    pub seed_base: u64,
    /// Repetitions per cell; timings are the per-step median.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    /// Parallel streams. Timings are only meaningful with 1.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Trace file written by `generate --trace-attention`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, env = "LINEAR_KV_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub rho: Option<Rho>,
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long = "seed-base", default_value_t = 0)]
    pub seed_base: u64,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::TraceParse(_) | Error::NonFinite => EXIT_RUNTIME,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Writes via a temporary file and rename so readers never see partial output.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn rho_tag(rho: Rho) -> String {
    format!("{}-{}", rho.numer(), rho.denom())
}

pub fn trace_file_name(cfg: &RunConfig) -> String {
    format!(
        "trace_{}_{}_rho{}_seed{}.jsonl",
        cfg.label(),
        cfg.grid,
        rho_tag(cfg.rho),
        cfg.seed
    )
}

fn resolve(model: &ModelArgs, extra: PartialConfig) -> Result<RunConfig> {
    let cfg = load_config(model.config.as_deref(), model.partial().merge(extra))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(a: GenerateArgs) -> Result<i32> {
    let cfg = resolve(
        &a.model,
        PartialConfig {
            rho: a.rho,
            policy: a.policy,
            ablation: a.ablation,
            seed: a.seed,
            trace_attention: a.trace_attention.then_some(true),
            ..Default::default()
        },
    )?;
    let trace = run(&cfg, !a.no_timings)?;
    let path = a.model.out.join(trace_file_name(&cfg));
    write_atomic(&path, &trace.to_jsonl())?;
    let mem = bench::memory_report(&trace);
    println!(
        "{}: {} steps, eviction events at lines {:?}, peak per-head visual {} (B = {}), wrote {}",
        cfg.label(),
        trace.steps.len(),
        trace.eviction_lines(),
        mem.peak_head_visual,
        trace.header.budget.budget,
        path.display()
    );
    Ok(EXIT_OK)
}

/// One sweep cell's summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchSummary {
    pub policy: String,
    pub rho: String,
    pub seed: u64,
    pub steps: usize,
    pub peak_entries: usize,
    pub peak_bytes_fp16: u64,
    pub peak_bytes_fp32: u64,
    pub memory_saving: f64,
    pub mean_flops_last_half: f64,
    pub first_half_rate: f64,
    pub second_half_rate: f64,
    pub throughput_ratio: f64,
    pub eviction_events: usize,
}

pub const SUMMARY_CSV_HEADER: &str = "policy,rho,seed,steps,peak_entries,peak_bytes_fp16,peak_bytes_fp32,memory_saving,mean_flops_last_half,first_half_rate,second_half_rate,throughput_ratio,eviction_events";

fn summarize(trace: &DecodeTrace, full_peak: usize) -> Result<BenchSummary> {
    let mem = bench::memory_report(trace);
    let split = bench::split_half_throughput(trace)?;
    Ok(BenchSummary {
        policy: trace.config().label().into(),
        rho: trace.header.budget.rho.to_string(),
        seed: trace.config().seed,
        steps: trace.steps.len(),
        peak_entries: mem.peak_entries,
        peak_bytes_fp16: mem.peak_bytes_fp16,
        peak_bytes_fp32: mem.peak_bytes_fp32,
        memory_saving: 1.0 - mem.peak_entries as f64 / full_peak as f64,
        mean_flops_last_half: bench::mean_last_half(&bench::flops_proxy(trace)),
        first_half_rate: split.first_half_rate,
        second_half_rate: split.second_half_rate,
        throughput_ratio: split.ratio,
        eviction_events: trace.eviction_lines().len(),
    })
}

fn full_peak_entries(cfg: &RunConfig) -> usize {
    let c = cfg.model_config();
    (c.cond_len + cfg.grid.n()) * c.layers * c.kv_heads
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let base = resolve(
        &a.model,
        PartialConfig {
            rho: a.rho.first().copied(),
            ..Default::default()
        },
    )?;
    let mut cells = Vec::new();
    for &rho in &a.rho {
        for &policy in &a.policies {
            // the full cache ignores the ratio; run it once per seed
            if policy == PolicyKind::Full && rho != a.rho[0] {
                continue;
            }
            for seed in a.seed_base..a.seed_base + a.seeds {
                let cfg = RunConfig {
                    rho,
                    policy,
                    seed,
                    trace_attention: false,
                    ..base.clone()
                };
                cfg.validate()?;
                cells.push(cfg);
            }
        }
    }
    let exec = |cfg: &RunConfig| -> Result<(String, BenchSummary)> {
        let mut trace = run(cfg, true)?;
        if a.reps > 1 {
            let mut runs = vec![bench::step_ns(&trace)?];
            for _ in 1..a.reps {
                runs.push(bench::step_ns(&run(cfg, true)?)?);
            }
            for (s, ns) in trace.steps.iter_mut().zip(bench::median_step_ns(&runs)?) {
                s.step_ns = Some(ns);
            }
        }
        let mut rows = String::new();
        bench::step_csv_rows(&trace, &mut rows);
        Ok((rows, summarize(&trace, full_peak_entries(cfg))?))
    };
    let results: Vec<Result<(String, BenchSummary)>> = if a.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(a.jobs)
            .build()
            .map_err(|e| Error::Io(e.to_string()))?;
        pool.install(|| cells.par_iter().map(exec).collect())
    } else {
        cells.iter().map(exec).collect()
    };
    let meta = json!({
        "config": base,
        "rho": a.rho.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "policies": a.policies.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "seeds": (a.seed_base..a.seed_base + a.seeds).collect::<Vec<_>>(),
        "reps": a.reps,
    });
    let mut steps_csv = format!("# {meta}\n{STEP_CSV_HEADER}\n");
    let mut summary_csv = format!("# {meta}\n{SUMMARY_CSV_HEADER}\n");
    for r in results {
        let (rows, s) = r?;
        steps_csv.push_str(&rows);
        let _ = writeln!(
            summary_csv,
            "{},{},{},{},{},{},{},{:.6},{:.1},{:.3},{:.3},{:.4},{}",
            s.policy,
            s.rho,
            s.seed,
            s.steps,
            s.peak_entries,
            s.peak_bytes_fp16,
            s.peak_bytes_fp32,
            s.memory_saving,
            s.mean_flops_last_half,
            s.first_half_rate,
            s.second_half_rate,
            s.throughput_ratio,
            s.eviction_events
        );
    }
    let out = &a.model.out;
    write_atomic(&out.join("bench_steps.csv"), &steps_csv)?;
    write_atomic(&out.join("bench_summary.csv"), &summary_csv)?;
    println!("{} runs, wrote {}", cells.len(), out.join("bench_summary.csv").display());
    Ok(EXIT_OK)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<i32> {
    let trace = DecodeTrace::read_path(&a.trace)?;
    let alloc = analysis::allocation_series(&trace)?;
    let sims = analysis::similarity_table(&trace)?;
    let c = trace.config();
    let mut profiles = Vec::new();
    for layer in 0..c.layers {
        for head in 0..c.heads {
            profiles.push(((layer, head), analysis::locality_profile(&trace, layer, head)?));
        }
    }
    let meta = json!({ "config": c, "budget": trace.header.budget });
    let header = format!("# {meta}\n");
    write_atomic(&a.out.join("allocation.csv"), &(header.clone() + &analysis::allocation_csv(&alloc)))?;
    write_atomic(&a.out.join("similarity.csv"), &(header.clone() + &analysis::similarity_csv(&sims)))?;
    write_atomic(&a.out.join("locality.csv"), &(header + &analysis::locality_csv(&profiles)))?;

    let mean_sim_by_layer: Vec<f64> = (0..c.layers)
        .map(|l| {
            let xs: Vec<f64> = sims.iter().filter(|r| r.layer == l).map(|r| r.similarity).collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        })
        .collect();
    let summary = json!({
        "config": c,
        "budget": trace.header.budget,
        "similarity_measure": analysis::SIMILARITY_MEASURE,
        "mean_similarity_by_layer": mean_sim_by_layer,
        "final_step_cond_mass_by_layer": (0..c.layers).map(|l| {
            let rows: Vec<&analysis::AllocationRow> = alloc.iter()
                .filter(|r| r.layer == l && r.step + 1 == trace.steps.len()).collect();
            rows.iter().map(|r| r.alloc.cond_mass).sum::<f64>() / rows.len().max(1) as f64
        }).collect::<Vec<_>>(),
    });
    write_atomic(
        &a.out.join("analysis.json"),
        &serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?,
    )?;
    println!("wrote allocation.csv, similarity.csv, locality.csv, analysis.json to {}", a.out.display());
    Ok(EXIT_OK)
}

fn cmd_oracle(a: OracleArgs) -> Result<i32> {
    let results = oracle::run_all(a.seed);
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "[{}] {} ({} cases, {} failures; {})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.failures,
            r.detail
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_ORACLE })
}

fn cmd_ablate(a: AblateArgs) -> Result<i32> {
    let base = resolve(
        &a.model,
        PartialConfig {
            rho: a.rho,
            policy: Some(PolicyKind::Lineattn),
            ..Default::default()
        },
    )?;
    let mut csv = format!(
        "# {}\narm,seed,eviction_events,peak_head_visual,budget_violations,mean_flops_last_half,token_agreement_vs_full\n",
        json!({ "config": base })
    );
    let mut ok = true;
    for seed in a.seed_base..a.seed_base + a.seeds {
        let full = run(
            &RunConfig {
                policy: PolicyKind::Full,
                seed,
                ..base.clone()
            },
            false,
        )?;
        let streaming = run(
            &RunConfig {
                policy: PolicyKind::Streaming,
                seed,
                ..base.clone()
            },
            false,
        )?;
        let arms: Vec<Option<Ablation>> = std::iter::once(None).chain(Ablation::ALL.map(Some)).collect();
        for arm in arms {
            let cfg = RunConfig {
                ablation: arm,
                seed,
                ..base.clone()
            };
            let trace = run(&cfg, false)?;
            let violations = oracle::budget_violations(&trace);
            ok &= violations.is_empty();
            if arm == Some(Ablation::DisableMid) {
                let same = trace
                    .evictions()
                    .map(|r| (r.line, r.layer, r.head, &r.evicted_positions))
                    .eq(streaming
                        .evictions()
                        .map(|r| (r.line, r.layer, r.head, &r.evicted_positions)));
                if !same {
                    eprintln!("seed {seed}: disable-mid evictions differ from streaming");
                    ok = false;
                }
            }
            let agree = trace
                .footer
                .tokens
                .iter()
                .zip(&full.footer.tokens)
                .filter(|(a, b)| a == b)
                .count() as f64
                / full.footer.tokens.len() as f64;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{:.1},{:.4}",
                cfg.label(),
                seed,
                trace.eviction_lines().len(),
                bench::memory_report(&trace).peak_head_visual,
                violations.len(),
                bench::mean_last_half(&bench::flops_proxy(&trace)),
                agree
            );
        }
    }
    let path = a.model.out.join("ablation.csv");
    write_atomic(&path, &csv)?;
    print!("{}", csv.lines().skip(1).collect::<Vec<_>>().join("\n"));
    println!("\nwrote {}", path.display());
    Ok(if ok { EXIT_OK } else { EXIT_ORACLE })
}
