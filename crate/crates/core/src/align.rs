//! The timing alignment unit: maps simulated completion times onto
//! wall-clock targets anchored at run start and spin-waits on the monotonic
//! clock to release each acknowledgement at its target instant.
//!
//! The backend clock is the platform's highest-resolution monotonic clock,
//! which reports nanoseconds directly, so the tick-per-nanosecond scale is
//! fixed at 1. Anchoring still calibrates: it cross-checks the monotonic
//! rate against the system's wall clock and measures the clock-read
//! granularity that bounds release precision. Overruns (targets already in
//! the past) release immediately and are recorded, never hidden.

use std::sync::mpsc::{Receiver, Sender};
use std::time::{Duration, Instant, SystemTime};

use thiserror::Error;

use crate::sim::{Ack, RequestId, SimTime};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("alignment unit is already anchored")]
    AlreadyAnchored,
}

/// How the unit waits out the gap to a release target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpinPolicy {
    /// Busy-poll the clock for the whole wait. Best precision, burns a core.
    Pure,
    /// Sleep until close to the target, then spin. For shared machines.
    Hybrid,
}

/// Distance from the target at which hybrid waiting switches to spinning.
const HYBRID_SPIN_WINDOW: Duration = Duration::from_micros(200);

/// Wall-clock anchor of simulated time zero.
#[derive(Debug, Clone, Copy)]
pub struct WallAnchor {
    pub epoch: Instant,
    /// Monotonic ticks per simulated nanosecond.
    pub scale: f64,
    /// Measured cost of one clock read, in nanoseconds.
    pub read_granularity_ns: u64,
    /// Monotonic-vs-system rate cross-check from calibration (≈ 1.0).
    pub calibration_ratio: f64,
}

impl WallAnchor {
    pub fn to_wall(&self, sim: SimTime) -> Instant {
        self.epoch + Duration::from_nanos((sim.as_ns() as f64 * self.scale).round() as u64)
    }
}

/// Release bookkeeping for one acknowledgement. Wall values are nanoseconds
/// relative to the anchor epoch.
#[derive(Debug, Clone, Copy)]
pub struct ReleaseRecord {
    pub request: RequestId,
    pub sim_completion: SimTime,
    pub wall_target_ns: u64,
    pub wall_actual_ns: u64,
    pub lateness_ns: i64,
    pub overrun: bool,
}

impl ReleaseRecord {
    /// Deviation relative to time since run start, in percent.
    pub fn deviation_pct(&self) -> f64 {
        if self.wall_target_ns == 0 {
            return 0.0;
        }
        (self.wall_actual_ns as f64 - self.wall_target_ns as f64).abs()
            / self.wall_target_ns as f64
            * 100.0
    }

    pub fn log_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.request, self.sim_completion, self.wall_target_ns, self.wall_actual_ns, self.lateness_ns
        )
    }
}

/// Aggregate deviation statistics over a finished run.
#[derive(Debug, Clone, Default)]
pub struct LatenessSummary {
    pub count: u64,
    pub mean_pct: f64,
    pub max_pct: f64,
    pub mean_lateness_ns: f64,
    pub max_lateness_ns: i64,
    pub overruns: u64,
    pub monotone_violations: u64,
}

impl LatenessSummary {
    pub fn report_line(&self) -> String {
        format!(
            "releases={} mean_dev={:.6}% max_dev={:.6}% mean_late={:.0}ns max_late={}ns overruns={} monotone_violations={}",
            self.count,
            self.mean_pct,
            self.max_pct,
            self.mean_lateness_ns,
            self.max_lateness_ns,
            self.overruns,
            self.monotone_violations
        )
    }
}

pub struct Aligner {
    anchor: Option<WallAnchor>,
    policy: SpinPolicy,
    read_granularity_ns: u64,
    calibration_ratio: f64,
    records: Vec<ReleaseRecord>,
    overruns: u64,
    monotone_violations: u64,
    last_sim_completion: Option<SimTime>,
}

impl Aligner {
    /// Calibrates the clock up front (tens of milliseconds) so that
    /// anchoring itself is instantaneous and costs the run nothing.
    pub fn new(policy: SpinPolicy) -> Self {
        let (read_granularity_ns, calibration_ratio) = calibrate();
        Aligner {
            anchor: None,
            policy,
            read_granularity_ns,
            calibration_ratio,
            records: Vec::new(),
            overruns: 0,
            monotone_violations: 0,
            last_sim_completion: None,
        }
    }

    /// Anchors simulated time zero at the current instant.
    pub fn anchor(&mut self) -> Result<WallAnchor, AlignError> {
        self.anchor_at(Instant::now())
    }

    /// Anchors simulated time zero at `epoch` (normally the instant the
    /// engine starts processing events).
    pub fn anchor_at(&mut self, epoch: Instant) -> Result<WallAnchor, AlignError> {
        if self.anchor.is_some() {
            return Err(AlignError::AlreadyAnchored);
        }
        let anchor = WallAnchor {
            epoch,
            scale: 1.0,
            read_granularity_ns: self.read_granularity_ns,
            calibration_ratio: self.calibration_ratio,
        };
        self.anchor = Some(anchor);
        Ok(anchor)
    }

    pub fn wall_anchor(&self) -> Option<&WallAnchor> {
        self.anchor.as_ref()
    }

    /// Spins until the wall clock reaches the ack's target instant, then
    /// records the release. Targets already in the past release immediately
    /// with the overrun counted.
    pub fn release(&mut self, request: RequestId, sim_completion: SimTime) -> ReleaseRecord {
        let anchor = self.anchor.expect("anchored before first release");
        if let Some(last) = self.last_sim_completion {
            if sim_completion < last {
                self.monotone_violations += 1;
            }
        }
        self.last_sim_completion = Some(sim_completion);

        let target = anchor.to_wall(sim_completion);
        let entry = Instant::now();
        let overrun = entry > target;
        if !overrun {
            if self.policy == SpinPolicy::Hybrid {
                let remaining = target.saturating_duration_since(entry);
                if remaining > 2 * HYBRID_SPIN_WINDOW {
                    std::thread::sleep(remaining - HYBRID_SPIN_WINDOW);
                }
            }
            while Instant::now() < target {
                std::hint::spin_loop();
            }
        } else {
            self.overruns += 1;
        }
        let actual = Instant::now();
        let record = ReleaseRecord {
            request,
            sim_completion,
            wall_target_ns: (target - anchor.epoch).as_nanos() as u64,
            wall_actual_ns: (actual - anchor.epoch).as_nanos() as u64,
            lateness_ns: if actual >= target {
                (actual - target).as_nanos() as i64
            } else {
                -((target - actual).as_nanos() as i64)
            },
            overrun,
        };
        self.records.push(record);
        record
    }

    pub fn records(&self) -> &[ReleaseRecord] {
        &self.records
    }

    pub fn overruns(&self) -> u64 {
        self.overruns
    }

    pub fn monotone_violations(&self) -> u64 {
        self.monotone_violations
    }

    /// Aggregates per-request deviations the way the validation methodology
    /// does: |actual − target| relative to time since run start.
    pub fn lateness_report(&self) -> LatenessSummary {
        let mut summary = LatenessSummary {
            count: self.records.len() as u64,
            overruns: self.overruns,
            monotone_violations: self.monotone_violations,
            ..LatenessSummary::default()
        };
        if self.records.is_empty() {
            return summary;
        }
        let mut sum_pct = 0.0;
        let mut sum_late = 0.0;
        for r in &self.records {
            let dev = r.deviation_pct();
            sum_pct += dev;
            if dev > summary.max_pct {
                summary.max_pct = dev;
            }
            sum_late += r.lateness_ns as f64;
            summary.max_lateness_ns = summary.max_lateness_ns.max(r.lateness_ns);
        }
        summary.mean_pct = sum_pct / self.records.len() as f64;
        summary.mean_lateness_ns = sum_late / self.records.len() as f64;
        summary
    }
}

/// Measures clock-read granularity and the monotonic-vs-system rate.
fn calibrate() -> (u64, f64) {
    // Granularity: smallest positive delta between consecutive reads.
    let mut granularity = u64::MAX;
    let mut prev = Instant::now();
    for _ in 0..10_000 {
        let now = Instant::now();
        let delta = (now - prev).as_nanos() as u64;
        if delta > 0 && delta < granularity {
            granularity = delta;
        }
        prev = now;
    }
    if granularity == u64::MAX {
        granularity = 1;
    }
    // Rate cross-check over a short spin window. Preemption stretches both
    // clocks equally, so the ratio is robust to scheduling noise.
    let wall_start = SystemTime::now();
    let mono_start = Instant::now();
    while mono_start.elapsed() < Duration::from_millis(20) {
        std::hint::spin_loop();
    }
    let mono_ns = mono_start.elapsed().as_nanos() as f64;
    let wall_ns = wall_start.elapsed().map(|d| d.as_nanos() as f64).unwrap_or(mono_ns);
    let ratio = if wall_ns > 0.0 { mono_ns / wall_ns } else { 1.0 };
    (granularity, ratio)
}

/// An ack annotated with its wall-clock release, as seen by the host.
#[derive(Debug, Clone)]
pub struct ReleasedAck {
    pub ack: Ack,
    pub wall_target_ns: u64,
    pub wall_actual_ns: u64,
}

/// Everything the alignment thread hands back at shutdown.
#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub records: Vec<ReleaseRecord>,
    pub summary: LatenessSummary,
}

/// Spawns the alignment unit on its own thread. It waits for the engine's
/// start instant on `epoch_rx`, then releases every ack from `ack_rx` at its
/// wall target, forwarding released acks to `out_tx`. Returns its records
/// when the ack channel closes.
pub fn spawn_aligner(
    policy: SpinPolicy,
    epoch_rx: Receiver<Instant>,
    ack_rx: Receiver<Ack>,
    out_tx: Sender<ReleasedAck>,
    pin: Option<usize>,
) -> std::thread::JoinHandle<AlignOutcome> {
    std::thread::Builder::new()
        .name("timing-align".into())
        .spawn(move || {
            if let Some(core) = pin {
                crate::affinity::pin_current_thread(core);
            }
            let mut aligner = Aligner::new(policy);
            let epoch = epoch_rx.recv().expect("engine sends its start instant");
            aligner.anchor_at(epoch).expect("fresh aligner");
            while let Ok(ack) = ack_rx.recv() {
                let record = aligner.release(ack.request, ack.t_complete_sim);
                let released = ReleasedAck {
                    ack,
                    wall_target_ns: record.wall_target_ns,
                    wall_actual_ns: record.wall_actual_ns,
                };
                if out_tx.send(released).is_err() {
                    break;
                }
            }
            let summary = aligner.lateness_report();
            AlignOutcome { records: aligner.records, summary }
        })
        .expect("spawn alignment thread")
}
