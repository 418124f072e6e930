//! Line-oriented trace and result-log formats, plus the synthetic workload
//! generator.
//!
//! Both formats are plain text with space-separated fields and a one-line
//! versioned header, so they diff cleanly and parse trivially:
//!
//! ```text
//! nandsim-trace v1
//! <t_issue_ns> <read|program|erase> <bus> <chip> <block> <page> [payload]
//! ```
//!
//! Program lines carry a payload spec: `const:<byte>`, `rand:<seed>`, or
//! `file:<path>`. Result logs carry one line per request:
//!
//! ```text
//! nandsim-results v1 mode=<vt|rt>
//! <request_id> <t_issue> <t_complete_sim> [wall_release_ns] <OK|Fail|Dropped>
//! ```
//!
//! The wall-release column is present in real-time mode only. Requests
//! dropped by a power failure report the drop time and a zero wall release.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{Geometry, PageAddress};
use crate::timing::OpKind;

pub const TRACE_HEADER: &str = "nandsim-trace v1";
pub const RESULT_HEADER_PREFIX: &str = "nandsim-results v1 mode=";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad workload spec: {0}")]
    BadSpec(String),
}

fn io_err(path: &Path, source: std::io::Error) -> TraceError {
    TraceError::Io { path: path.display().to_string(), source }
}

/// Payload pattern for a program request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PayloadSpec {
    Const(u8),
    Rand(u64),
    File(PathBuf),
}

impl PayloadSpec {
    pub fn parse(token: &str) -> Result<Self, String> {
        let (kind, arg) = token
            .split_once(':')
            .ok_or_else(|| format!("payload `{token}` must be kind:value"))?;
        match kind {
            "const" => arg
                .parse::<u8>()
                .map(PayloadSpec::Const)
                .map_err(|_| format!("bad const byte `{arg}`")),
            "rand" => arg
                .parse::<u64>()
                .map(PayloadSpec::Rand)
                .map_err(|_| format!("bad rand seed `{arg}`")),
            "file" => Ok(PayloadSpec::File(PathBuf::from(arg))),
            other => Err(format!("unknown payload kind `{other}`")),
        }
    }

    /// Materializes the page bytes for this spec.
    pub fn materialize(&self, page_size: usize) -> Result<Arc<Vec<u8>>, String> {
        match self {
            PayloadSpec::Const(b) => Ok(Arc::new(vec![*b; page_size])),
            PayloadSpec::Rand(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut buf = vec![0u8; page_size];
                rng.fill(buf.as_mut_slice());
                Ok(Arc::new(buf))
            }
            PayloadSpec::File(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| format!("cannot read payload file {}: {e}", path.display()))?;
                if bytes.len() != page_size {
                    return Err(format!(
                        "payload file {} is {} bytes, page size is {page_size}",
                        path.display(),
                        bytes.len()
                    ));
                }
                Ok(Arc::new(bytes))
            }
        }
    }
}

impl fmt::Display for PayloadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayloadSpec::Const(b) => write!(f, "const:{b}"),
            PayloadSpec::Rand(s) => write!(f, "rand:{s}"),
            PayloadSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// One request in a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLine {
    pub t_issue_ns: u64,
    pub kind: OpKind,
    pub addr: PageAddress,
    pub payload: Option<PayloadSpec>,
}

impl TraceLine {
    pub fn format(&self) -> String {
        let a = self.addr;
        let base = format!(
            "{} {} {} {} {} {}",
            self.t_issue_ns,
            self.kind.name(),
            a.bus,
            a.chip,
            a.block,
            a.page
        );
        match &self.payload {
            Some(p) => format!("{base} {p}"),
            None => base,
        }
    }
}

fn parse_kind(token: &str) -> Result<OpKind, String> {
    match token {
        "read" => Ok(OpKind::Read),
        "program" => Ok(OpKind::Program),
        "erase" => Ok(OpKind::Erase),
        other => Err(format!("unknown op `{other}`")),
    }
}

/// Reads a trace file, checking the header, field shapes, geometry bounds,
/// and the non-decreasing issue-time invariant.
pub fn read_trace(path: &Path, geometry: &Geometry) -> Result<Vec<TraceLine>, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parse = |line: usize, msg: String| TraceError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == TRACE_HEADER => {}
        Some((_, header)) => return Err(parse(1, format!("bad header `{header}`"))),
        None => return Err(parse(1, "empty file".into())),
    }
    let mut out = Vec::new();
    let mut last_t = 0u64;
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 6 {
            return Err(parse(lineno, format!("expected 6+ fields, got {}", fields.len())));
        }
        let t_issue_ns: u64 =
            fields[0].parse().map_err(|_| parse(lineno, format!("bad time `{}`", fields[0])))?;
        let kind = parse_kind(fields[1]).map_err(|m| parse(lineno, m))?;
        let mut coords = [0u32; 4];
        for (i, c) in coords.iter_mut().enumerate() {
            *c = fields[2 + i]
                .parse()
                .map_err(|_| parse(lineno, format!("bad coordinate `{}`", fields[2 + i])))?;
        }
        let addr = PageAddress::new(coords[0], coords[1], coords[2], coords[3]);
        if !geometry.contains(addr) {
            return Err(parse(lineno, format!("address {addr} out of bounds")));
        }
        let payload = match (kind, fields.get(6)) {
            (OpKind::Program, Some(tok)) => Some(PayloadSpec::parse(tok).map_err(|m| parse(lineno, m))?),
            (OpKind::Program, None) => {
                return Err(parse(lineno, "program line needs a payload spec".into()))
            }
            (_, Some(tok)) => {
                return Err(parse(lineno, format!("unexpected payload `{tok}` on non-program")))
            }
            (_, None) => None,
        };
        if t_issue_ns < last_t {
            return Err(parse(lineno, "issue times must be non-decreasing".into()));
        }
        last_t = t_issue_ns;
        out.push(TraceLine { t_issue_ns, kind, addr, payload });
    }
    Ok(out)
}

pub fn write_trace(path: &Path, lines: &[TraceLine]) -> Result<(), TraceError> {
    let mut text = String::from(TRACE_HEADER);
    text.push('\n');
    for line in lines {
        text.push_str(&line.format());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Terminal status of a request in a result log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultStatus {
    Ok,
    Fail,
    Dropped,
}

impl ResultStatus {
    pub fn name(self) -> &'static str {
        match self {
            ResultStatus::Ok => "OK",
            ResultStatus::Fail => "Fail",
            ResultStatus::Dropped => "Dropped",
        }
    }

    fn parse(token: &str) -> Result<Self, String> {
        match token {
            "OK" => Ok(ResultStatus::Ok),
            "Fail" => Ok(ResultStatus::Fail),
            "Dropped" => Ok(ResultStatus::Dropped),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// One request's outcome in a result log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResultLine {
    pub request_id: u64,
    pub t_issue_ns: u64,
    pub t_complete_sim_ns: u64,
    /// Wall-clock release relative to the run anchor; real-time mode only.
    pub wall_release_ns: Option<u64>,
    pub status: ResultStatus,
}

impl ResultLine {
    fn format(&self) -> String {
        match self.wall_release_ns {
            Some(w) => format!(
                "{} {} {} {} {}",
                self.request_id,
                self.t_issue_ns,
                self.t_complete_sim_ns,
                w,
                self.status.name()
            ),
            None => format!(
                "{} {} {} {}",
                self.request_id, self.t_issue_ns, self.t_complete_sim_ns, self.status.name()
            ),
        }
    }
}

pub fn result_log_to_string(mode_rt: bool, lines: &[ResultLine]) -> String {
    let mut text = format!("{}{}\n", RESULT_HEADER_PREFIX, if mode_rt { "rt" } else { "vt" });
    for line in lines {
        text.push_str(&line.format());
        text.push('\n');
    }
    text
}

pub fn write_results(path: &Path, mode_rt: bool, lines: &[ResultLine]) -> Result<(), TraceError> {
    std::fs::write(path, result_log_to_string(mode_rt, lines)).map_err(|e| io_err(path, e))
}

/// Parses a result log, returning the lines and whether it was a real-time
/// log (wall-release column present).
pub fn read_results(path: &Path) -> Result<(Vec<ResultLine>, bool), TraceError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parse = |line: usize, msg: String| TraceError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let mode_rt = match lines.next() {
        Some((_, h)) if h.trim() == format!("{RESULT_HEADER_PREFIX}vt") => false,
        Some((_, h)) if h.trim() == format!("{RESULT_HEADER_PREFIX}rt") => true,
        Some((_, h)) => return Err(parse(1, format!("bad header `{h}`"))),
        None => return Err(parse(1, "empty file".into())),
    };
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let want = if mode_rt { 5 } else { 4 };
        if fields.len() != want {
            return Err(parse(lineno, format!("expected {want} fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<u64, TraceError> {
            fields[i].parse().map_err(|_| parse(lineno, format!("bad number `{}`", fields[i])))
        };
        out.push(ResultLine {
            request_id: num(0)?,
            t_issue_ns: num(1)?,
            t_complete_sim_ns: num(2)?,
            wall_release_ns: if mode_rt { Some(num(3)?) } else { None },
            status: ResultStatus::parse(fields[want - 1]).map_err(|m| parse(lineno, m))?,
        });
    }
    Ok((out, mode_rt))
}

/// Inter-arrival pattern between bursts of generated requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterArrival {
    Fixed,
    Exponential,
}

/// Synthetic workload descriptor.
///
/// Requests are emitted in bursts of `burst` back-to-back issues (a crude
/// queue-depth knob) separated by the configured inter-arrival gap. The
/// default 70/25/5 read/program/erase mix and burst of 8 are arbitrary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub count: u64,
    pub read_frac: f64,
    pub program_frac: f64,
    pub erase_frac: f64,
    pub start_ns: u64,
    pub inter_arrival: InterArrival,
    pub inter_arrival_ns: u64,
    pub burst: u32,
    /// Payload rule for programs: "rand" or "const:<byte>".
    pub payload: String,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            count: 1000,
            read_frac: 0.70,
            program_frac: 0.25,
            erase_frac: 0.05,
            start_ns: 0,
            inter_arrival: InterArrival::Fixed,
            inter_arrival_ns: 100_000,
            burst: 8,
            payload: "rand".into(),
        }
    }
}

impl WorkloadSpec {
    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let spec: WorkloadSpec =
            toml::from_str(&text).map_err(|e| TraceError::BadSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let sum = self.read_frac + self.program_frac + self.erase_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TraceError::BadSpec(format!("op fractions must sum to 1, got {sum}")));
        }
        if [self.read_frac, self.program_frac, self.erase_frac]
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(TraceError::BadSpec("op fractions must be in [0,1]".into()));
        }
        if self.burst == 0 {
            return Err(TraceError::BadSpec("burst must be >= 1".into()));
        }
        if !self.payload.starts_with("const:") && self.payload != "rand" {
            return Err(TraceError::BadSpec(format!("bad payload rule `{}`", self.payload)));
        }
        Ok(())
    }
}

/// Per-chip log-structured write pointer used by the generator so that every
/// generated program targets an erased page (traces stay valid FTL behavior
/// under fault-free execution).
struct WriteFrontier {
    block: u32,
    page: u32,
    wrapped: bool,
}

/// Generates a deterministic trace for (spec, seed).
pub fn gen_trace(
    spec: &WorkloadSpec,
    geometry: &Geometry,
    seed: u64,
) -> Result<Vec<TraceLine>, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chip_count = geometry.chip_count();
    let mut frontiers: Vec<WriteFrontier> =
        (0..chip_count).map(|_| WriteFrontier { block: 0, page: 0, wrapped: false }).collect();
    let mut out = Vec::with_capacity(spec.count as usize);
    let mut t = spec.start_ns;
    let mut in_burst = 0u32;

    let payload_const: Option<u8> = spec
        .payload
        .strip_prefix("const:")
        .map(|b| b.parse::<u8>().map_err(|_| TraceError::BadSpec(format!("bad const byte `{b}`"))))
        .transpose()?;

    while (out.len() as u64) < spec.count {
        if in_burst == spec.burst {
            in_burst = 0;
            let gap = match spec.inter_arrival {
                InterArrival::Fixed => spec.inter_arrival_ns,
                InterArrival::Exponential => {
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    (-u.ln() * spec.inter_arrival_ns as f64).round() as u64
                }
            };
            t += gap.max(1);
        }
        in_burst += 1;

        let chip_idx = rng.random_range(0..chip_count);
        let bus = chip_idx as u32 / geometry.chips_per_bus;
        let chip = chip_idx as u32 % geometry.chips_per_bus;

        let x: f64 = rng.random();
        if x < spec.read_frac {
            let addr = PageAddress::new(
                bus,
                chip,
                rng.random_range(0..geometry.blocks_per_chip),
                rng.random_range(0..geometry.pages_per_block),
            );
            out.push(TraceLine { t_issue_ns: t, kind: OpKind::Read, addr, payload: None });
        } else if x < spec.read_frac + spec.program_frac {
            let f = &mut frontiers[chip_idx];
            if f.page == 0 && f.wrapped {
                // Re-entering a used block: erase it before programming.
                let addr = PageAddress::new(bus, chip, f.block, 0);
                out.push(TraceLine { t_issue_ns: t, kind: OpKind::Erase, addr, payload: None });
                if (out.len() as u64) == spec.count {
                    break;
                }
            }
            let addr = PageAddress::new(bus, chip, f.block, f.page);
            f.page += 1;
            if f.page == geometry.pages_per_block {
                f.page = 0;
                f.block += 1;
                if f.block == geometry.blocks_per_chip {
                    f.block = 0;
                    f.wrapped = true;
                }
            }
            let payload = match payload_const {
                Some(b) => PayloadSpec::Const(b),
                None => PayloadSpec::Rand(rng.random()),
            };
            out.push(TraceLine { t_issue_ns: t, kind: OpKind::Program, addr, payload: Some(payload) });
        } else {
            let addr = PageAddress::new(bus, chip, rng.random_range(0..geometry.blocks_per_chip), 0);
            out.push(TraceLine { t_issue_ns: t, kind: OpKind::Erase, addr, payload: None });
        }
    }
    Ok(out)
}

/// Expands a trace into submit-ready tuples.
pub fn materialize_lines(
    lines: &[TraceLine],
    page_size: usize,
) -> Result<Vec<(u64, OpKind, PageAddress, Option<Arc<Vec<u8>>>)>, TraceError> {
    let mut cache: HashMap<String, Arc<Vec<u8>>> = HashMap::new();
    let mut out = Vec::with_capacity(lines.len());
    for (idx, line) in lines.iter().enumerate() {
        let data = match &line.payload {
            Some(spec) => {
                let key = spec.to_string();
                let buf = match cache.get(&key) {
                    Some(b) => b.clone(),
                    None => {
                        let b = spec.materialize(page_size).map_err(|m| TraceError::Parse {
                            path: "<trace>".into(),
                            line: idx + 2,
                            msg: m,
                        })?;
                        cache.insert(key, b.clone());
                        b
                    }
                };
                Some(buf)
            }
            None => None,
        };
        out.push((line.t_issue_ns, line.kind, line.addr, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> Geometry {
        Geometry {
            buses: 2,
            chips_per_bus: 2,
            blocks_per_chip: 16,
            pages_per_block: 8,
            page_size_bytes: 64,
        }
    }

    #[test]
    fn trace_round_trips_through_text() {
        let lines = vec![
            TraceLine {
                t_issue_ns: 0,
                kind: OpKind::Program,
                addr: PageAddress::new(0, 1, 2, 3),
                payload: Some(PayloadSpec::Rand(42)),
            },
            TraceLine {
                t_issue_ns: 10,
                kind: OpKind::Read,
                addr: PageAddress::new(1, 0, 5, 7),
                payload: None,
            },
            TraceLine {
                t_issue_ns: 10,
                kind: OpKind::Erase,
                addr: PageAddress::new(1, 1, 9, 0),
                payload: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace");
        write_trace(&path, &lines).unwrap();
        let back = read_trace(&path, &geometry()).unwrap();
        assert_eq!(back, lines);
    }

    #[test]
    fn trace_parser_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace");
        let cases = [
            "wrong header\n0 read 0 0 0 0\n",
            "nandsim-trace v1\n0 scrub 0 0 0 0\n",
            "nandsim-trace v1\n0 read 0 0 99 0\n",
            "nandsim-trace v1\n0 program 0 0 0 0\n",
            "nandsim-trace v1\n0 read 0 0 0 0 const:1\n",
            "nandsim-trace v1\n10 read 0 0 0 0\n5 read 0 0 0 0\n",
        ];
        for text in cases {
            std::fs::write(&path, text).unwrap();
            assert!(read_trace(&path, &geometry()).is_err(), "accepted: {text}");
        }
    }

    #[test]
    fn results_round_trip_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let vt = vec![
            ResultLine {
                request_id: 0,
                t_issue_ns: 5,
                t_complete_sim_ns: 100,
                wall_release_ns: None,
                status: ResultStatus::Ok,
            },
            ResultLine {
                request_id: 1,
                t_issue_ns: 6,
                t_complete_sim_ns: 90,
                wall_release_ns: None,
                status: ResultStatus::Dropped,
            },
        ];
        let path = dir.path().join("vt.log");
        write_results(&path, false, &vt).unwrap();
        let (back, mode_rt) = read_results(&path).unwrap();
        assert!(!mode_rt);
        assert_eq!(back, vt);

        let rt = vec![ResultLine {
            request_id: 0,
            t_issue_ns: 5,
            t_complete_sim_ns: 100,
            wall_release_ns: Some(104),
            status: ResultStatus::Fail,
        }];
        let path = dir.path().join("rt.log");
        write_results(&path, true, &rt).unwrap();
        let (back, mode_rt) = read_results(&path).unwrap();
        assert!(mode_rt);
        assert_eq!(back, rt);
    }

    #[test]
    fn payload_specs_parse_and_materialize() {
        let c = PayloadSpec::parse("const:171").unwrap();
        assert_eq!(c, PayloadSpec::Const(171));
        assert_eq!(c.materialize(4).unwrap().as_ref(), &vec![171u8; 4]);
        let r = PayloadSpec::parse("rand:7").unwrap();
        let a = r.materialize(32).unwrap();
        let b = r.materialize(32).unwrap();
        assert_eq!(a, b);
        assert!(PayloadSpec::parse("garbage").is_err());
    }

    #[test]
    fn gen_trace_zero_count_is_empty() {
        let spec = WorkloadSpec { count: 0, ..WorkloadSpec::default() };
        let lines = gen_trace(&spec, &geometry(), 1).unwrap();
        assert!(lines.is_empty());
    }

    #[test]
    fn gen_trace_pure_reads_shape() {
        let spec = WorkloadSpec {
            count: 1000,
            read_frac: 1.0,
            program_frac: 0.0,
            erase_frac: 0.0,
            ..WorkloadSpec::default()
        };
        let g = geometry();
        let lines = gen_trace(&spec, &g, 3).unwrap();
        assert_eq!(lines.len(), 1000);
        let mut last = 0;
        for line in &lines {
            assert_eq!(line.kind, OpKind::Read);
            assert!(g.contains(line.addr));
            assert!(line.t_issue_ns >= last);
            last = line.t_issue_ns;
        }
    }

    #[test]
    fn gen_trace_is_deterministic_per_seed() {
        let spec = WorkloadSpec::default();
        let g = geometry();
        assert_eq!(gen_trace(&spec, &g, 9).unwrap(), gen_trace(&spec, &g, 9).unwrap());
        assert_ne!(gen_trace(&spec, &g, 9).unwrap(), gen_trace(&spec, &g, 10).unwrap());
    }

    #[test]
    fn generated_programs_always_target_erased_pages() {
        // Replay the generator's own model: programs must never hit a page
        // that is still programmed.
        let spec = WorkloadSpec {
            count: 5000,
            read_frac: 0.2,
            program_frac: 0.7,
            erase_frac: 0.1,
            ..WorkloadSpec::default()
        };
        let g = geometry();
        let lines = gen_trace(&spec, &g, 11).unwrap();
        let mut programmed = std::collections::HashSet::new();
        for line in &lines {
            match line.kind {
                OpKind::Program => {
                    assert!(programmed.insert(line.addr), "double program at {}", line.addr);
                }
                OpKind::Erase => {
                    programmed.retain(|a: &PageAddress| {
                        (a.bus, a.chip, a.block) != (line.addr.bus, line.addr.chip, line.addr.block)
                    });
                }
                OpKind::Read => {}
            }
        }
    }

    #[test]
    fn workload_spec_validation() {
        let mut spec = WorkloadSpec::default();
        spec.read_frac = 0.9;
        assert!(spec.validate().is_err());
        let mut spec = WorkloadSpec::default();
        spec.payload = "noise".into();
        assert!(spec.validate().is_err());
        assert!(WorkloadSpec::default().validate().is_ok());
    }
}
