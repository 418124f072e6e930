use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use nandsim::align::SpinPolicy;
use nandsim::config::SimConfig;
use nandsim::harness::{self, PfStrategy, RunOptions};
use nandsim::sim::Mode;
use nandsim::trace;

#[derive(Parser)]
#[command(name = "nandsim", about = "Phase-accurate NAND flash simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rt,
    Vt,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpinArg {
    /// Busy-poll the whole wait (best precision, dedicated core).
    Pure,
    /// Sleep until close to each target, then spin (shared machines).
    Hybrid,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace against the simulator and write the result log.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Power-failure schedule: one simulated-time ns per line.
        #[arg(long)]
        pf_schedule: Option<PathBuf>,
        /// Overrides the config's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Release log path (real-time mode; default <out>.release).
        #[arg(long)]
        release_log: Option<PathBuf>,
        /// Also write the processed-event log here.
        #[arg(long)]
        event_log: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pure")]
        spin: SpinArg,
    },
    /// Compare two result logs and emit per-request deviations as CSV.
    Compare {
        log_a: PathBuf,
        log_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic trace from a workload spec.
    GenTrace {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Geometry source for address bounds (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run repeated fault-injection campaigns over one trace.
    FaultCampaign {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        runs: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fixed power-failure schedule applied to every run.
        #[arg(long)]
        pf_schedule: Option<PathBuf>,
        /// Disable power failures (internal faults only).
        #[arg(long)]
        no_pf: bool,
    },
}

fn write_file(path: &PathBuf, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            trace: trace_path,
            mode,
            pf_schedule,
            seed,
            out,
            release_log,
            event_log,
            spin,
        } => {
            let cfg = SimConfig::load(&config)?;
            let lines = trace::read_trace(&trace_path, &cfg.geometry)?;
            let pf = match pf_schedule {
                Some(p) => harness::read_pf_schedule(&p)?,
                None => Vec::new(),
            };
            let opts = RunOptions {
                mode: match mode {
                    ModeArg::Rt => Mode::RealTime,
                    ModeArg::Vt => Mode::Virtual,
                },
                seed,
                spin: match spin {
                    SpinArg::Pure => SpinPolicy::Pure,
                    SpinArg::Hybrid => SpinPolicy::Hybrid,
                },
                pf_schedule: pf,
            };
            let output = harness::run_trace(&cfg, &lines, &opts)?;
            write_file(&out, &output.result_log_text())?;
            if let Some(align) = &output.align {
                let path = release_log.unwrap_or_else(|| {
                    let mut p = out.clone().into_os_string();
                    p.push(".release");
                    PathBuf::from(p)
                });
                let mut text = String::new();
                for rec in &align.records {
                    text.push_str(&rec.log_line());
                    text.push('\n');
                }
                write_file(&path, &text)?;
                println!("{}", align.summary.report_line());
                if let Some(stats) = &output.copy_stats {
                    println!(
                        "copies={} max_copy={}ns p999_copy={}ns budget={}ns over_budget={}",
                        stats.copies,
                        stats.max_ns(),
                        stats.percentile_ns(0.999),
                        stats.budget_ns,
                        stats.over_budget
                    );
                }
            }
            if let Some(path) = event_log {
                write_file(&path, &output.event_log_text())?;
            }
            println!("{} requests -> {}", output.results.len(), out.display());
        }
        Command::Compare { log_a, log_b, out } => {
            let (a, _) = trace::read_results(&log_a)?;
            let (b, _) = trace::read_results(&log_b)?;
            let cmp = harness::compare(&a, &b)?;
            write_file(&out, &cmp.csv())?;
            println!("{}", cmp.summary_line());
        }
        Command::GenTrace { spec, seed, out, config } => {
            let spec = trace::WorkloadSpec::load(&spec)?;
            let geometry = match config {
                Some(p) => SimConfig::load(&p)?.geometry,
                None => Default::default(),
            };
            let lines = trace::gen_trace(&spec, &geometry, seed)?;
            trace::write_trace(&out, &lines)?;
            println!("{} requests -> {}", lines.len(), out.display());
        }
        Command::FaultCampaign { config, trace: trace_path, runs, seed, out, pf_schedule, no_pf } => {
            let cfg = SimConfig::load(&config)?;
            let lines = trace::read_trace(&trace_path, &cfg.geometry)?;
            let strategy = if no_pf {
                PfStrategy::None
            } else {
                match pf_schedule {
                    Some(p) => PfStrategy::Fixed(harness::read_pf_schedule(&p)?),
                    None => PfStrategy::UniformRandom,
                }
            };
            let report = harness::fault_campaign(&cfg, &lines, runs, seed, strategy)?;
            write_file(&out, &report.text())?;
            println!(
                "{} runs: ok={} fail={} dropped={} invariant_violations={}",
                runs,
                report.total_ok,
                report.total_fail,
                report.total_dropped,
                report.invariant_violations
            );
            if report.invariant_violations > 0 {
                anyhow::bail!("invariant violations detected");
            }
        }
    }
    Ok(())
}
