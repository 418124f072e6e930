//! Simulated durations for every phase of erase/program/read operations.
//!
//! Bus phases are derived from the bus width and frequency; array phases are
//! drawn from configurable two-mode latency mixtures. MLC parts show bimodal
//! read/program latencies between paired pages, so the mixture can either be
//! sampled randomly or pinned to page-index parity.
//!
//! All functions here are pure over the config plus an explicitly passed RNG.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::flash::PageAddress;

/// The three externally visible flash operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Read,
    Program,
    Erase,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Program => "program",
            OpKind::Erase => "erase",
        }
    }
}

/// How a bimodal latency mode is chosen per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlcMode {
    /// Mode picked per sample: `mode_a` with probability `weight_a`.
    RandomMixture,
    /// Even page index uses `mode_a`, odd uses `mode_b`.
    PagePairDeterministic,
}

/// Two-mode latency mixture with optional truncated-normal jitter.
///
/// The default mode values are representative MLC magnitudes, not measured
/// figures; override them in the config for a specific part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyDist {
    pub mode_a_ns: u64,
    pub mode_b_ns: u64,
    pub weight_a: f64,
    pub jitter_sigma_ns: u64,
}

impl Default for LatencyDist {
    fn default() -> Self {
        LatencyDist { mode_a_ns: 50_000, mode_b_ns: 110_000, weight_a: 0.5, jitter_sigma_ns: 0 }
    }
}

impl LatencyDist {
    pub fn fixed(ns: u64) -> Self {
        LatencyDist { mode_a_ns: ns, mode_b_ns: ns, weight_a: 1.0, jitter_sigma_ns: 0 }
    }

    pub fn validate(&self, name: &str) -> Result<(), String> {
        if self.mode_a_ns > self.mode_b_ns {
            return Err(format!("{name}: mode_a_ns must be <= mode_b_ns"));
        }
        if !(0.0..=1.0).contains(&self.weight_a) {
            return Err(format!("{name}: weight_a must be in [0,1]"));
        }
        if self.mode_a_ns == 0 {
            return Err(format!("{name}: mode_a_ns must be > 0"));
        }
        Ok(())
    }
}

/// Bus and array timing parameters. Defaults model an 8-bit 33 MHz flash bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub bus_width_bits: u32,
    pub bus_freq_hz: u64,
    /// Bus cycles consumed by a command+address sequence.
    pub cmd_addr_cycles: u32,
    /// Bus cycles consumed by a status check.
    pub status_check_cycles: u32,
    pub read_latency: LatencyDist,
    pub program_latency: LatencyDist,
    pub erase_latency: LatencyDist,
    pub mlc_mode: MlcMode,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            bus_width_bits: 8,
            bus_freq_hz: 33_000_000,
            cmd_addr_cycles: 6,
            status_check_cycles: 3,
            read_latency: LatencyDist::default(),
            program_latency: LatencyDist {
                mode_a_ns: 250_000,
                mode_b_ns: 900_000,
                weight_a: 0.5,
                jitter_sigma_ns: 0,
            },
            erase_latency: LatencyDist {
                mode_a_ns: 2_500_000,
                mode_b_ns: 2_500_000,
                weight_a: 1.0,
                jitter_sigma_ns: 0,
            },
            mlc_mode: MlcMode::RandomMixture,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.bus_freq_hz == 0 {
            return Err("bus_freq_hz must be > 0".into());
        }
        if self.bus_width_bits != 8 && self.bus_width_bits != 16 {
            return Err("bus_width_bits must be 8 or 16".into());
        }
        self.read_latency.validate("read_latency")?;
        self.program_latency.validate("program_latency")?;
        self.erase_latency.validate("erase_latency")?;
        Ok(())
    }

    /// Time to move `n_bytes` over the flash bus, rounded to the nearest ns.
    pub fn transfer_time(&self, n_bytes: usize) -> u64 {
        let num = n_bytes as u128 * 8 * 1_000_000_000;
        let den = self.bus_width_bits as u128 * self.bus_freq_hz as u128;
        ((num + den / 2) / den) as u64
    }

    /// Duration of `cycles` bus cycles, rounded to the nearest ns.
    pub fn cycles_to_ns(&self, cycles: u32) -> u64 {
        let num = cycles as u128 * 1_000_000_000;
        let den = self.bus_freq_hz as u128;
        ((num + den / 2) / den) as u64
    }

    fn dist_for(&self, op: OpKind) -> &LatencyDist {
        match op {
            OpKind::Read => &self.read_latency,
            OpKind::Program => &self.program_latency,
            OpKind::Erase => &self.erase_latency,
        }
    }

    /// Draws one array latency for `op` at `addr`. Always strictly positive.
    pub fn sample_latency<R: Rng + ?Sized>(&self, op: OpKind, addr: PageAddress, rng: &mut R) -> u64 {
        let dist = self.dist_for(op);
        let mode = match self.mlc_mode {
            MlcMode::RandomMixture => {
                if rng.random_bool(dist.weight_a) {
                    dist.mode_a_ns
                } else {
                    dist.mode_b_ns
                }
            }
            MlcMode::PagePairDeterministic => {
                if addr.page % 2 == 0 {
                    dist.mode_a_ns
                } else {
                    dist.mode_b_ns
                }
            }
        };
        if dist.jitter_sigma_ns == 0 {
            return mode.max(1);
        }
        let normal = Normal::new(0.0, dist.jitter_sigma_ns as f64)
            .expect("jitter sigma is finite and non-negative");
        let jitter = normal.sample(rng);
        let jittered = mode as f64 + jitter;
        // Truncate at zero; latencies are strictly positive.
        if jittered < 1.0 {
            1
        } else {
            jittered.round() as u64
        }
    }
}

/// Which hardware unit a phase occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resource {
    Bus,
    Chip,
}

/// The five phase classes of the three flash operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseKind {
    CmdAddr,
    DataIn,
    ArrayBusy,
    DataOut,
    StatusCheck,
}

impl PhaseKind {
    pub fn resource(self) -> Resource {
        match self {
            PhaseKind::ArrayBusy => Resource::Chip,
            _ => Resource::Bus,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::CmdAddr => "cmd_addr",
            PhaseKind::DataIn => "data_in",
            PhaseKind::ArrayBusy => "array_busy",
            PhaseKind::DataOut => "data_out",
            PhaseKind::StatusCheck => "status_check",
        }
    }
}

/// One planned phase of a request, with its duration fixed at plan time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub duration_ns: u64,
}

impl Phase {
    pub fn resource(&self) -> Resource {
        self.kind.resource()
    }
}

/// Builds the ordered phase list of one operation, sampling the array
/// latency once. Erase and program end with a status check; reads finish
/// with the data transfer out of the chip.
pub fn phase_plan<R: Rng + ?Sized>(
    timing: &TimingConfig,
    op: OpKind,
    addr: PageAddress,
    page_size: usize,
    rng: &mut R,
) -> Vec<Phase> {
    let cmd = Phase { kind: PhaseKind::CmdAddr, duration_ns: timing.cycles_to_ns(timing.cmd_addr_cycles) };
    let status = Phase {
        kind: PhaseKind::StatusCheck,
        duration_ns: timing.cycles_to_ns(timing.status_check_cycles),
    };
    let busy = Phase { kind: PhaseKind::ArrayBusy, duration_ns: timing.sample_latency(op, addr, rng) };
    match op {
        OpKind::Erase => vec![cmd, busy, status],
        OpKind::Program => {
            let data_in =
                Phase { kind: PhaseKind::DataIn, duration_ns: timing.transfer_time(page_size) };
            vec![cmd, data_in, busy, status]
        }
        OpKind::Read => {
            let data_out =
                Phase { kind: PhaseKind::DataOut, duration_ns: timing.transfer_time(page_size) };
            vec![cmd, busy, data_out]
        }
    }
}
