//! Run orchestration: trace replay in virtual or real time, result-log
//! comparison, and fault campaigns.
//!
//! Virtual-time runs execute inline on the calling thread and are the
//! deterministic oracle: (config, trace, seed) fully determines the result
//! log. Real-time runs spawn the event loop, the execution unit, and the
//! alignment unit on their own threads; the caller consumes released acks.

use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use thiserror::Error;

use crate::affinity::AffinityHints;
use crate::align::{spawn_aligner, AlignOutcome, SpinPolicy};
use crate::config::{ConfigError, SimConfig};
use crate::controller::SubmitError;
use crate::executor::{CopyStats, ThreadedExecutor};
use crate::flash::FlashArray;
use crate::sim::{Ack, AckStatus, Event, Mode, SimError, SimTime, Simulator};
use crate::trace::{
    materialize_lines, ResultLine, ResultStatus, TraceError, TraceLine,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("submit failed: {0}")]
    Submit(#[from] SubmitError),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("result logs cover different request ids")]
    IdMismatch,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Per-run options beyond the config file.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    /// Overrides the config's `rng_seed` when set.
    pub seed: Option<u64>,
    pub spin: SpinPolicy,
    /// Power failures to inject, in simulated nanoseconds.
    pub pf_schedule: Vec<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { mode: Mode::Virtual, seed: None, spin: SpinPolicy::Pure, pf_schedule: Vec::new() }
    }
}

/// Everything a single run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub mode: Mode,
    pub results: Vec<ResultLine>,
    pub events: Vec<Event>,
    pub final_hash: String,
    pub state_tallies: [u64; 4],
    /// Release records and deviation summary (real-time mode).
    pub align: Option<AlignOutcome>,
    /// Copy feasibility statistics (real-time mode).
    pub copy_stats: Option<CopyStats>,
}

impl RunOutput {
    pub fn result_log_text(&self) -> String {
        crate::trace::result_log_to_string(self.mode == Mode::RealTime, &self.results)
    }

    pub fn event_log_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.log_line());
            out.push('\n');
        }
        out
    }
}

fn ack_status(s: AckStatus) -> ResultStatus {
    match s {
        AckStatus::Ok => ResultStatus::Ok,
        AckStatus::Fail => ResultStatus::Fail,
    }
}

fn preload_all(
    sim: &mut Simulator,
    lines: &[TraceLine],
    page_size: usize,
    pf_schedule: &[u64],
) -> Result<(), HarnessError> {
    for (t, kind, addr, data) in materialize_lines(lines, page_size)? {
        sim.preload(kind, addr, data, SimTime::from_ns(t))?;
    }
    for pf in pf_schedule {
        sim.schedule_power_failure(SimTime::from_ns(*pf))?;
    }
    Ok(())
}

/// Replays a trace and returns the full run output.
pub fn run_trace(
    cfg: &SimConfig,
    lines: &[TraceLine],
    opts: &RunOptions,
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let seed = opts.seed.unwrap_or(cfg.fault.rng_seed);
    match opts.mode {
        Mode::Virtual => run_virtual(cfg, lines, seed, &opts.pf_schedule),
        Mode::RealTime => run_real_time(cfg, lines, seed, &opts.pf_schedule, opts.spin),
    }
}

fn run_virtual(
    cfg: &SimConfig,
    lines: &[TraceLine],
    seed: u64,
    pf_schedule: &[u64],
) -> Result<RunOutput, HarnessError> {
    let mut sim = Simulator::new_vt(cfg, seed);
    preload_all(&mut sim, lines, cfg.geometry.page_size(), pf_schedule)?;
    sim.run_to_exhaustion();

    let mut results: Vec<ResultLine> = sim
        .take_acks()
        .into_iter()
        .map(|a| ResultLine {
            request_id: a.request.0,
            t_issue_ns: a.t_issue.as_ns(),
            t_complete_sim_ns: a.t_complete_sim.as_ns(),
            wall_release_ns: None,
            status: ack_status(a.status),
        })
        .collect();
    append_drops(&mut results, &mut sim, false);

    let events = sim.take_event_log();
    let (final_hash, state_tallies) = {
        let flash = sim.flash().lock().expect("flash lock");
        (flash.content_hash(), flash.state_tallies())
    };
    Ok(RunOutput {
        mode: Mode::Virtual,
        results,
        events,
        final_hash,
        state_tallies,
        align: None,
        copy_stats: None,
    })
}

fn append_drops(results: &mut Vec<ResultLine>, sim: &mut Simulator, rt: bool) {
    for d in sim.take_drops() {
        results.push(ResultLine {
            request_id: d.request.0,
            t_issue_ns: d.t_issue.as_ns(),
            t_complete_sim_ns: d.drop_time.as_ns(),
            wall_release_ns: rt.then_some(0),
            status: ResultStatus::Dropped,
        });
    }
}

fn run_real_time(
    cfg: &SimConfig,
    lines: &[TraceLine],
    seed: u64,
    pf_schedule: &[u64],
    spin: SpinPolicy,
) -> Result<RunOutput, HarnessError> {
    let hints = AffinityHints::from_env();
    let flash = Arc::new(Mutex::new(FlashArray::new(cfg.geometry)));
    let budget_ns = cfg.timing.transfer_time(cfg.geometry.page_size()) / 10;
    let exec = ThreadedExecutor::spawn(flash.clone(), budget_ns, hints.executor);

    let (ack_tx, align_rx) = mpsc::channel::<Ack>();
    let (epoch_tx, epoch_rx) = mpsc::channel::<Instant>();
    let (out_tx, out_rx) = mpsc::channel();
    let align_handle = spawn_aligner(spin, epoch_rx, align_rx, out_tx, hints.align);

    let mut sim = Simulator::new_rt(cfg, seed, flash, exec, ack_tx);
    preload_all(&mut sim, lines, cfg.geometry.page_size(), pf_schedule)?;

    let engine = std::thread::Builder::new()
        .name("event-loop".into())
        .spawn(move || {
            if let Some(core) = hints.engine {
                crate::affinity::pin_current_thread(core);
            }
            // Simulated time zero anchors here.
            epoch_tx.send(Instant::now()).expect("alignment unit waits for the epoch");
            sim.run_to_exhaustion();
            sim
        })
        .expect("spawn engine thread");

    let mut sim = engine.join().expect("engine thread panicked");
    let events = sim.take_event_log();
    let mut results = Vec::new();
    append_drops(&mut results, &mut sim, true);
    let drops = results; // acks get prepended below in release order

    let (final_hash, state_tallies) = {
        let flash = sim.flash().lock().expect("flash lock");
        (flash.content_hash(), flash.state_tallies())
    };
    let exec = sim.into_executor().expect("real-time engine owns the executor");
    // Dropping the simulator closed the ack channel; the alignment unit now
    // drains its backlog at wall pace and exits.
    let mut results: Vec<ResultLine> = out_rx
        .iter()
        .map(|r| ResultLine {
            request_id: r.ack.request.0,
            t_issue_ns: r.ack.t_issue.as_ns(),
            t_complete_sim_ns: r.ack.t_complete_sim.as_ns(),
            wall_release_ns: Some(r.wall_actual_ns),
            status: ack_status(r.ack.status),
        })
        .collect();
    results.extend(drops);
    let align = align_handle.join().expect("alignment thread panicked");
    let copy_stats = exec.finish();

    Ok(RunOutput {
        mode: Mode::RealTime,
        results,
        events,
        final_hash,
        state_tallies,
        align: Some(align),
        copy_stats: Some(copy_stats),
    })
}

/// Per-request deviation between two result logs.
#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub mean_pct: f64,
    pub max_pct: f64,
    pub compared: u64,
    /// (request id, t_a ns, t_b ns, deviation %)
    pub per_request: Vec<(u64, u64, u64, f64)>,
}

impl CompareOutput {
    pub fn csv(&self) -> String {
        let mut out = String::from("request_id,t_a_ns,t_b_ns,deviation_pct\n");
        for (id, a, b, d) in &self.per_request {
            out.push_str(&format!("{id},{a},{b},{d:.9}\n"));
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "compared={} mean_dev={:.6}% max_dev={:.6}%",
            self.compared, self.mean_pct, self.max_pct
        )
    }
}

/// Completion time of a result-log line, measured from run start: the wall
/// release when present (real-time logs), else the simulated completion.
fn completion_ns(line: &ResultLine) -> u64 {
    line.wall_release_ns.unwrap_or(line.t_complete_sim_ns)
}

/// Computes per-request deviation |t_a − t_b| / t_b over requests acked in
/// both logs. The logs must cover the same request ids.
pub fn compare(a: &[ResultLine], b: &[ResultLine]) -> Result<CompareOutput, HarnessError> {
    use std::collections::BTreeMap;
    let index = |lines: &[ResultLine]| -> BTreeMap<u64, ResultLine> {
        lines.iter().map(|l| (l.request_id, *l)).collect()
    };
    let map_a = index(a);
    let map_b = index(b);
    if map_a.len() != a.len() || map_b.len() != b.len() {
        return Err(HarnessError::IdMismatch);
    }
    if map_a.keys().ne(map_b.keys()) {
        return Err(HarnessError::IdMismatch);
    }
    let mut per_request = Vec::new();
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (id, la) in &map_a {
        let lb = &map_b[id];
        if la.status == ResultStatus::Dropped || lb.status == ResultStatus::Dropped {
            continue;
        }
        let ta = completion_ns(la);
        let tb = completion_ns(lb);
        let dev = if tb == 0 {
            0.0
        } else {
            (ta as f64 - tb as f64).abs() / tb as f64 * 100.0
        };
        sum += dev;
        max = max.max(dev);
        per_request.push((*id, ta, tb, dev));
    }
    let compared = per_request.len() as u64;
    Ok(CompareOutput {
        mean_pct: if compared == 0 { 0.0 } else { sum / compared as f64 },
        max_pct: max,
        compared,
        per_request,
    })
}

/// Power-failure placement for fault campaigns.
#[derive(Debug, Clone)]
pub enum PfStrategy {
    /// No external faults; only probabilistic internal faults.
    None,
    /// One power failure per run, uniform over the fault-free makespan.
    UniformRandom,
    /// The same fixed schedule every run.
    Fixed(Vec<u64>),
}

/// One campaign cycle's outcome.
#[derive(Debug, Clone)]
pub struct CampaignRun {
    pub run: u32,
    pub pf_times: Vec<u64>,
    pub acked_ok: u64,
    pub acked_fail: u64,
    pub dropped: u64,
    pub state_tallies: [u64; 4],
}

/// Aggregated campaign report.
#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub runs: Vec<CampaignRun>,
    pub total_ok: u64,
    pub total_fail: u64,
    pub total_dropped: u64,
    pub invariant_violations: u64,
}

impl CampaignReport {
    pub fn text(&self) -> String {
        let mut out = String::from(
            "run pf_times acked_ok acked_fail dropped erased_prog erased_noprog prog_ok prog_notok\n",
        );
        for r in &self.runs {
            let pf = if r.pf_times.is_empty() {
                "-".to_string()
            } else {
                r.pf_times.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";")
            };
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {}\n",
                r.run,
                pf,
                r.acked_ok,
                r.acked_fail,
                r.dropped,
                r.state_tallies[0],
                r.state_tallies[1],
                r.state_tallies[2],
                r.state_tallies[3],
            ));
        }
        out.push_str(&format!(
            "total ok={} fail={} dropped={} invariant_violations={}\n",
            self.total_ok, self.total_fail, self.total_dropped, self.invariant_violations
        ));
        out
    }
}

fn mix_seed(seed: u64, run: u32) -> u64 {
    // splitmix-style derivation so each run draws an independent pf slot.
    let mut x = seed ^ ((run as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 31)
}

/// Replays the trace `n_runs` times against one persistent array, injecting
/// power failures per `strategy` and rebooting between runs. Array contents
/// survive reboots, so later runs start from whatever states earlier faults
/// left behind. Runs execute in virtual time.
pub fn fault_campaign(
    cfg: &SimConfig,
    lines: &[TraceLine],
    n_runs: u32,
    seed: u64,
    strategy: PfStrategy,
) -> Result<CampaignReport, HarnessError> {
    cfg.validate()?;
    let page_size = cfg.geometry.page_size();
    // Fault-free probe fixes the makespan used for uniform pf placement.
    let makespan = {
        let probe_cfg = SimConfig {
            fault: crate::fault::FaultConfig {
                p_erase_internal: 0.0,
                p_program_internal: 0.0,
                ..cfg.fault
            },
            ..cfg.clone()
        };
        let probe = run_virtual(&probe_cfg, lines, seed, &[])?;
        probe.results.iter().map(|r| r.t_complete_sim_ns).max().unwrap_or(0)
    };

    let mut sim = Simulator::new_vt(cfg, seed);
    let mut runs = Vec::with_capacity(n_runs as usize);
    let mut total_ok = 0;
    let mut total_fail = 0;
    let mut total_dropped = 0;
    let mut invariant_violations = 0;

    for run in 0..n_runs {
        let pf_times: Vec<u64> = match &strategy {
            PfStrategy::None => Vec::new(),
            PfStrategy::Fixed(times) => times.clone(),
            PfStrategy::UniformRandom => {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, run));
                vec![rng.random_range(0..=makespan.max(1))]
            }
        };
        preload_all(&mut sim, lines, page_size, &pf_times)?;
        sim.run_to_exhaustion();

        let acks = sim.take_acks();
        let drops = sim.take_drops();
        sim.take_event_log();
        let acked_ok = acks.iter().filter(|a| a.status == AckStatus::Ok).count() as u64;
        let acked_fail = acks.iter().filter(|a| a.status == AckStatus::Fail).count() as u64;
        let dropped = drops.len() as u64;
        if acks.len() + drops.len() != lines.len() {
            invariant_violations += 1;
        }
        let state_tallies = {
            let flash = sim.flash().lock().expect("flash lock");
            if flash.check_invariants().is_err() {
                invariant_violations += 1;
            }
            flash.state_tallies()
        };
        total_ok += acked_ok;
        total_fail += acked_fail;
        total_dropped += dropped;
        runs.push(CampaignRun { run, pf_times, acked_ok, acked_fail, dropped, state_tallies });

        if sim.is_halted() {
            sim.reboot()?;
        }
    }

    Ok(CampaignReport { runs, total_ok, total_fail, total_dropped, invariant_violations })
}

/// Reads a power-failure schedule file: one simulated-time ns per line.
pub fn read_pf_schedule(path: &std::path::Path) -> Result<Vec<u64>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ns: u64 = line.parse().map_err(|_| {
            HarnessError::Trace(TraceError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad time `{line}`"),
            })
        })?;
        out.push(ns);
    }
    Ok(out)
}
