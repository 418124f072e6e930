//! Shared helpers and independent oracles for the integration tests.

use std::collections::HashMap;

use nandsim::config::SimConfig;
use nandsim::flash::FlashArray;
use nandsim::sim::{Event, EventKind, ResourceId};
use nandsim::timing::{LatencyDist, MlcMode, PhaseKind};
use nandsim::trace::{materialize_lines, TraceLine};
use nandsim::{Geometry, OpKind};

/// Small geometry keeping arrays and traces cheap.
pub fn small_geometry() -> Geometry {
    Geometry {
        buses: 2,
        chips_per_bus: 2,
        blocks_per_chip: 8,
        pages_per_block: 8,
        page_size_bytes: 512,
    }
}

/// Config with fully deterministic latencies (single mode, no jitter).
pub fn det_config(geometry: Geometry) -> SimConfig {
    let mut cfg = SimConfig { geometry, ..SimConfig::default() };
    cfg.timing.read_latency = LatencyDist::fixed(50_000);
    cfg.timing.program_latency = LatencyDist::fixed(250_000);
    cfg.timing.erase_latency = LatencyDist::fixed(2_000_000);
    cfg.timing.mlc_mode = MlcMode::RandomMixture;
    cfg
}

/// One issued phase reconstructed from the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseInterval {
    pub resource: ResourceId,
    pub start_ns: u64,
    pub end_ns: u64,
    pub request: u64,
    pub kind: PhaseKind,
}

/// Pairs PhaseStart/PhaseEnd events into intervals.
pub fn phase_intervals(events: &[Event]) -> Vec<PhaseInterval> {
    let mut open: HashMap<(u64, usize), (ResourceId, u64, PhaseKind)> = HashMap::new();
    let mut out = Vec::new();
    for e in events {
        match e.kind {
            EventKind::PhaseStart { request, phase, kind, resource } => {
                let prev = open.insert((request.0, phase), (resource, e.time.as_ns(), kind));
                assert!(prev.is_none(), "phase started twice");
            }
            EventKind::PhaseEnd { request, phase, kind, resource } => {
                let (res, start, k) = open
                    .remove(&(request.0, phase))
                    .expect("phase ended without a start");
                assert_eq!(res, resource);
                assert_eq!(k, kind);
                out.push(PhaseInterval {
                    resource,
                    start_ns: start,
                    end_ns: e.time.as_ns(),
                    request: request.0,
                    kind,
                });
            }
            _ => {}
        }
    }
    assert!(open.is_empty(), "phases left open: {open:?}");
    out
}

/// Interval-overlap oracle: asserts that intervals on every resource are
/// pairwise disjoint (touching endpoints allowed). Returns intervals grouped
/// by resource for further checks.
pub fn assert_resource_exclusive(
    intervals: &[PhaseInterval],
) -> HashMap<ResourceId, Vec<PhaseInterval>> {
    let mut by_resource: HashMap<ResourceId, Vec<PhaseInterval>> = HashMap::new();
    for iv in intervals {
        by_resource.entry(iv.resource).or_default().push(*iv);
    }
    for (res, list) in by_resource.iter_mut() {
        list.sort_by_key(|iv| (iv.start_ns, iv.end_ns));
        for pair in list.windows(2) {
            assert!(
                pair[0].end_ns <= pair[1].start_ns,
                "overlap on {res}: {:?} vs {:?}",
                pair[0],
                pair[1]
            );
        }
    }
    by_resource
}

/// True if any two intervals of `a` and `b` overlap in open-interval terms.
pub fn any_overlap(a: &[PhaseInterval], b: &[PhaseInterval]) -> bool {
    a.iter().any(|x| b.iter().any(|y| x.start_ns < y.end_ns && y.start_ns < x.end_ns))
}

/// Independent serial-execution oracle: applies each request's final effect
/// in arrival (trace) order, with no timing model at all, and returns the
/// array hash. Fault-free concurrent execution must agree with this.
pub fn serial_final_hash(cfg: &SimConfig, lines: &[TraceLine]) -> String {
    let mut arr = FlashArray::new(cfg.geometry);
    let materialized =
        materialize_lines(lines, cfg.geometry.page_size()).expect("trace materializes");
    for (_, kind, addr, data) in materialized {
        match kind {
            OpKind::Program => {
                // Programming a non-programmable page fails and, over
                // existing data, corrupts it; fault-free valid traces never
                // do that, so the oracle stays simple.
                arr.commit_program(addr, data.expect("program payload").as_ref())
                    .expect("oracle trace in bounds");
            }
            OpKind::Erase => arr.commit_erase(addr).expect("oracle trace in bounds"),
            OpKind::Read => {}
        }
    }
    arr.content_hash()
}

/// Expected processed-event count for one solo request: arrival + one queue
/// move at first issue + one retire move + start/end per phase + one
/// transfer completion per bulk copy + the ack.
pub fn expected_solo_events(kind: OpKind) -> u64 {
    let (phases, transfers) = match kind {
        OpKind::Read => (3, 1),
        OpKind::Program => (4, 1),
        OpKind::Erase => (3, 0),
    };
    1 + 1 + 1 + 2 * phases + transfers + 1
}
