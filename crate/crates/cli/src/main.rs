//! Command-line front end: trace generation, decode replay, oracle outputs,
//! timing, parameter sweeps and ledger audits.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use multipole::bench::{microbench, sweep, write_sweep_csv, MicrobenchOptions, SweepAxis};
use multipole::pipeline::{reports_to_jsonl, run_with_outputs, EngineState, RunOptions};
use multipole::trace::{gen_synthetic, load_trace, write_trace, HeadLayout, KvTrace, SyntheticSpec};
use multipole::{AttentionMode, EngineConfig};

#[derive(Debug, Parser)]
#[command(name = "multipole", version, about = "Clustered KV-cache attention for decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture trace.
    Gen(GenArgs),
    /// Replay a trace and write one JSON report per decode step.
    Decode(DecodeArgs),
    /// Write dense exact attention outputs for every decode step as JSON lines.
    Oracle(OracleArgs),
    /// Time the decode stages and print the table as JSON.
    Bench(BenchArgs),
    /// Run the trace once per value of one parameter and write CSV.
    Sweep(SweepArgs),
    /// Replay a trace auditing every ledger after each update; exits nonzero on a violation.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set B=256`. Applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<EngineConfig> {
        let mut cfg = EngineConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_kv(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not KEY=VALUE");
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TraceArgs {
    /// MPKV trace file.
    trace: PathBuf,
    /// Only replay the first N decode steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl TraceArgs {
    fn load(&self) -> Result<KvTrace<f32>> {
        let trace = load_trace::<f32>(&self.trace).with_context(|| format!("loading {}", self.trace.display()))?;
        Ok(match self.steps {
            Some(n) if n < trace.decode_steps() => trace.truncate_steps(n),
            _ => trace,
        })
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Generator seed.
    #[arg(long)]
    seed: u64,
    /// Output path.
    #[arg(long, short)]
    out: PathBuf,
    /// Mixture components per kv-head.
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    /// Total positions, prompt plus decode steps.
    #[arg(long, default_value_t = 8192)]
    seq_len: usize,
    #[arg(long, default_value_t = 100)]
    decode_steps: usize,
    #[arg(long, default_value_t = 8)]
    q_heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    query_scale: f64,
    #[arg(long, default_value_t = 2)]
    hot_clusters: usize,
    #[arg(long, default_value_t = 1.0)]
    semantic_fraction: f64,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// multipole, oracle, flat-no-replacement or positional-baseline.
    #[arg(long, default_value = "multipole")]
    mode: AttentionMode,
    /// Record per-head error against dense exact attention.
    #[arg(long)]
    oracle: bool,
    /// Audit the ledgers after every update.
    #[arg(long)]
    audit: bool,
    /// Report destination; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write the final ledgers of every kv-head as JSON.
    #[arg(long)]
    ledger_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "multipole")]
    mode: AttentionMode,
    /// Leading steps excluded from the statistics.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Measured steps; defaults to every step after the warmup.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "multipole")]
    mode: AttentionMode,
    /// budget, r, W or p.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma separated values, e.g. `32,64,128`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "multipole")]
    mode: AttentionMode,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn gen(args: GenArgs) -> Result<()> {
    let layout = HeadLayout::new(args.q_heads, args.kv_heads, args.head_dim)?;
    let mut spec = SyntheticSpec::new(args.clusters, args.seq_len, layout, args.seed);
    spec.decode_steps = args.decode_steps;
    spec.noise_sigma = args.noise;
    spec.query_scale = args.query_scale;
    spec.hot_clusters = args.hot_clusters;
    spec.semantic_fraction = args.semantic_fraction;
    let trace = gen_synthetic::<f32>(&spec)?;
    write_trace(&trace, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {}: prompt {} + {} steps, {} q-heads / {} kv-heads, d={}",
        args.out.display(),
        trace.prompt_len(),
        trace.decode_steps(),
        layout.num_q_heads,
        layout.num_kv_heads,
        layout.head_dim
    );
    Ok(())
}

fn decode(args: DecodeArgs) -> Result<()> {
    let trace = args.trace.load()?;
    let cfg = args.config.load()?;
    let opts = RunOptions {
        oracle: args.oracle,
        audit: args.audit,
    };
    let mut state = EngineState::prefill(&trace, &cfg, args.mode)?;
    let mut out = output(args.out.as_deref())?;
    let mut violations = 0;
    for step in 0..trace.decode_steps() {
        let (_, report) = state.step_trace(&trace, step, opts)?;
        violations += report.audit_violations.len();
        out.write_all(reports_to_jsonl(std::slice::from_ref(&report))?.as_bytes())?;
    }
    out.flush()?;
    if let Some(path) = &args.ledger_out {
        let ledgers: Vec<_> = state.ledgers().iter().map(|l| l.summary()).collect();
        fs::write(path, serde_json::to_string_pretty(&ledgers)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if violations > 0 {
        bail!("{violations} ledger audit violations");
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let trace = args.trace.load()?;
    let cfg = args.config.load()?;
    let (outputs, _) = run_with_outputs(&trace, &cfg, AttentionMode::Oracle, RunOptions::default())?;
    let mut out = output(args.out.as_deref())?;
    for (step, heads) in outputs.iter().enumerate() {
        let line = json!({ "step": step, "position": trace.query_position(step), "outputs": heads });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let trace = args.trace.load()?;
    let cfg = args.config.load()?;
    let repeats = args
        .repeats
        .unwrap_or_else(|| trace.decode_steps().saturating_sub(args.warmup));
    let opts = MicrobenchOptions {
        warmup: args.warmup,
        repeats,
    };
    let table = microbench(&trace, &cfg, args.mode, opts)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    eprintln!("update overhead: {:.2}% of the median step", 100.0 * table.update_overhead());
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let trace = args.trace.load()?;
    let cfg = args.config.load()?;
    let rows = sweep(&trace, &cfg, args.mode, args.axis, &args.values)?;
    write_sweep_csv(&rows, output(args.out.as_deref())?)?;
    Ok(())
}

fn audit(args: AuditArgs) -> Result<()> {
    let trace = args.trace.load()?;
    let cfg = args.config.load()?;
    let mut state = EngineState::prefill(&trace, &cfg, args.mode)?;
    let mut violations: Vec<String> = state
        .audit()
        .violations
        .into_iter()
        .map(|v| format!("prefill: {v}"))
        .collect();
    let opts = RunOptions {
        oracle: false,
        audit: true,
    };
    let mut updates = 0;
    for step in 0..trace.decode_steps() {
        let (_, report) = state.step_trace(&trace, step, opts)?;
        updates += usize::from(report.update_occurred);
        violations.extend(report.audit_violations.into_iter().map(|v| format!("step {step}: {v}")));
    }
    for v in &violations {
        println!("{v}");
    }
    if !violations.is_empty() {
        bail!("{} violations over {updates} updates", violations.len());
    }
    println!("ok: prefill and {updates} updates audited");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => gen(a),
        Command::Decode(a) => decode(a),
        Command::Oracle(a) => oracle(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Audit(a) => audit(a),
    }
}
