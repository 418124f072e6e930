//! Engine-level behavior: solo request timing, event accounting,
//! out-of-order interleaving, hazards, power failures, and determinism.

mod common;

use std::sync::Arc;

use common::*;
use nandsim::config::SimConfig;
use nandsim::controller::SubmitError;
use nandsim::fault::bit_difference;
use nandsim::sim::{AckStatus, EventKind, SimError, SimTime, Simulator};
use nandsim::timing::PhaseKind;
use nandsim::trace::{gen_trace, WorkloadSpec};
use nandsim::{AbstractPageState, OpKind, PageAddress};

fn addr(bus: u32, chip: u32, block: u32, page: u32) -> PageAddress {
    PageAddress::new(bus, chip, block, page)
}

fn payload(cfg: &SimConfig, byte: u8) -> Option<Arc<Vec<u8>>> {
    Some(Arc::new(vec![byte; cfg.geometry.page_size()]))
}

/// Closed-form service time of one op on an idle system, from the config.
fn analytic_service_ns(cfg: &SimConfig, kind: OpKind) -> u64 {
    let t = &cfg.timing;
    let cmd = t.cycles_to_ns(t.cmd_addr_cycles);
    let status = t.cycles_to_ns(t.status_check_cycles);
    let xfer = t.transfer_time(cfg.geometry.page_size());
    match kind {
        OpKind::Read => cmd + t.read_latency.mode_a_ns + xfer,
        OpKind::Program => cmd + xfer + t.program_latency.mode_a_ns + status,
        OpKind::Erase => cmd + t.erase_latency.mode_a_ns + status,
    }
}

#[test]
fn empty_queue_step_is_a_no_op() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 1);
    assert_eq!(sim.now(), SimTime::ZERO);
    assert!(sim.run_step().is_none());
    assert_eq!(sim.now(), SimTime::ZERO);
}

#[test]
fn run_until_respects_the_limit() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 1);
    sim.preload(OpKind::Read, addr(0, 0, 0, 0), None, SimTime::from_ns(10)).unwrap();
    assert_eq!(sim.run_until(SimTime::ZERO), 0);
    assert_eq!(sim.now(), SimTime::ZERO);
    assert!(sim.run_until(SimTime::MAX) > 0);
}

#[test]
fn now_tracks_processed_event_times() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 1);
    sim.preload(OpKind::Read, addr(0, 0, 0, 0), None, SimTime::from_ns(77)).unwrap();
    sim.run_step();
    assert_eq!(sim.now(), SimTime::from_ns(77));
}

#[test]
fn solo_requests_match_analytic_service_times() {
    for (kind, byte) in [(OpKind::Read, None), (OpKind::Program, Some(0xA5)), (OpKind::Erase, None)]
    {
        let cfg = det_config(small_geometry());
        let mut sim = Simulator::new_vt(&cfg, 7);
        let data = byte.and_then(|b| payload(&cfg, b));
        let t_issue = 1_000;
        sim.preload(kind, addr(0, 0, 0, 0), data, SimTime::from_ns(t_issue)).unwrap();
        sim.run_to_exhaustion();
        let acks = sim.take_acks();
        assert_eq!(acks.len(), 1);
        let service = acks[0].t_complete_sim.as_ns() - t_issue;
        assert_eq!(service, analytic_service_ns(&cfg, kind), "{kind:?}");
        assert_eq!(acks[0].status, AckStatus::Ok);
    }
}

#[test]
fn solo_event_counts_match_the_phase_plan_oracle() {
    for kind in [OpKind::Read, OpKind::Program, OpKind::Erase] {
        let cfg = det_config(small_geometry());
        let mut sim = Simulator::new_vt(&cfg, 3);
        let data = (kind == OpKind::Program).then(|| payload(&cfg, 1).unwrap());
        sim.preload(kind, addr(0, 0, 0, 0), data, SimTime::ZERO).unwrap();
        let processed = sim.run_to_exhaustion();
        assert_eq!(processed, expected_solo_events(kind), "{kind:?}");
    }
}

#[test]
fn independent_requests_compose_event_counts() {
    let cfg = det_config(small_geometry());
    let solo = |a: PageAddress| {
        let mut sim = Simulator::new_vt(&cfg, 5);
        sim.preload(OpKind::Read, a, None, SimTime::ZERO).unwrap();
        sim.run_to_exhaustion()
    };
    let together = {
        let mut sim = Simulator::new_vt(&cfg, 5);
        sim.preload(OpKind::Read, addr(0, 0, 0, 0), None, SimTime::ZERO).unwrap();
        sim.preload(OpKind::Read, addr(1, 1, 0, 0), None, SimTime::ZERO).unwrap();
        sim.run_to_exhaustion()
    };
    assert_eq!(together, solo(addr(0, 0, 0, 0)) + solo(addr(1, 1, 0, 0)));
}

#[test]
fn event_times_never_decrease_and_everything_is_processed() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 11);
    let spec = WorkloadSpec { count: 200, inter_arrival_ns: 50_000, ..WorkloadSpec::default() };
    let lines = gen_trace(&spec, &cfg.geometry, 21).unwrap();
    for (t, kind, a, data) in
        nandsim::trace::materialize_lines(&lines, cfg.geometry.page_size()).unwrap()
    {
        sim.preload(kind, a, data, SimTime::from_ns(t)).unwrap();
    }
    sim.run_to_exhaustion();
    let events = sim.take_event_log();
    let mut last = 0;
    let mut max_time = 0;
    for e in &events {
        assert!(e.time.as_ns() >= last, "time regressed");
        last = e.time.as_ns();
        max_time = max_time.max(e.time.as_ns());
    }
    assert!(sim.now().as_ns() <= max_time);
    // Conservation: exhaustion processes every scheduled event exactly once.
    assert_eq!(sim.scheduled_events(), sim.processed_events());
    assert_eq!(events.len() as u64, sim.processed_events());
}

#[test]
fn ack_times_are_non_decreasing_in_processing_order() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 13);
    let spec = WorkloadSpec { count: 300, inter_arrival_ns: 20_000, ..WorkloadSpec::default() };
    let lines = gen_trace(&spec, &cfg.geometry, 31).unwrap();
    for (t, kind, a, data) in
        nandsim::trace::materialize_lines(&lines, cfg.geometry.page_size()).unwrap()
    {
        sim.preload(kind, a, data, SimTime::from_ns(t)).unwrap();
    }
    sim.run_to_exhaustion();
    let acks = sim.take_acks();
    assert_eq!(acks.len(), 300);
    let mut last = 0;
    for a in &acks {
        assert!(a.t_complete_sim.as_ns() >= last);
        last = a.t_complete_sim.as_ns();
    }
}

#[test]
fn read_array_end_enqueues_transfer_with_deadline_formula() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 17);
    sim.preload(OpKind::Read, addr(0, 0, 2, 3), None, SimTime::ZERO).unwrap();
    sim.run_to_exhaustion();
    let events = sim.take_event_log();
    let array_end = events
        .iter()
        .find(|e| matches!(e.kind, EventKind::PhaseEnd { kind: PhaseKind::ArrayBusy, .. }))
        .expect("array phase ends");
    let tc = events
        .iter()
        .find(|e| matches!(e.kind, EventKind::TransferComplete { .. }))
        .expect("transfer completes");
    let xfer = cfg.timing.transfer_time(cfg.geometry.page_size());
    assert_eq!(tc.time.as_ns(), array_end.time.as_ns() + xfer);
}

#[test]
fn virtual_mode_replays_are_byte_identical() {
    let cfg = det_config(small_geometry());
    let spec = WorkloadSpec { count: 150, ..WorkloadSpec::default() };
    let lines = gen_trace(&spec, &cfg.geometry, 41).unwrap();
    let run = || {
        let mut sim = Simulator::new_vt(&cfg, 99);
        for (t, kind, a, data) in
            nandsim::trace::materialize_lines(&lines, cfg.geometry.page_size()).unwrap()
        {
            sim.preload(kind, a, data, SimTime::from_ns(t)).unwrap();
        }
        sim.run_to_exhaustion();
        let log: String =
            sim.take_event_log().iter().map(|e| e.log_line() + "\n").collect();
        let hash = sim.flash().lock().unwrap().content_hash();
        (log, hash)
    };
    let (log_a, hash_a) = run();
    let (log_b, hash_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(hash_a, hash_b);
}

#[test]
fn two_chips_overlap_on_the_array_while_the_bus_serializes() {
    let mut g = small_geometry();
    g.buses = 1;
    let cfg = det_config(g);
    let mut sim = Simulator::new_vt(&cfg, 19);
    sim.preload(OpKind::Read, addr(0, 0, 0, 0), None, SimTime::ZERO).unwrap();
    sim.preload(OpKind::Read, addr(0, 1, 0, 0), None, SimTime::ZERO).unwrap();
    sim.run_to_exhaustion();
    let events = sim.take_event_log();
    let intervals = phase_intervals(&events);
    assert_resource_exclusive(&intervals);
    let busy_chip0: Vec<_> = intervals
        .iter()
        .filter(|iv| iv.kind == PhaseKind::ArrayBusy && iv.request == 0)
        .copied()
        .collect();
    let busy_chip1: Vec<_> = intervals
        .iter()
        .filter(|iv| iv.kind == PhaseKind::ArrayBusy && iv.request == 1)
        .copied()
        .collect();
    assert!(any_overlap(&busy_chip0, &busy_chip1), "array phases should overlap across chips");
}

#[test]
fn younger_request_on_free_chip_finishes_first() {
    // Older read waits behind a long erase on chip 0; the younger read on
    // chip 1 uses the shared bus and completes out of order.
    let mut g = small_geometry();
    g.buses = 1;
    let cfg = det_config(g);
    let mut sim = Simulator::new_vt(&cfg, 23);
    let erase = sim.preload(OpKind::Erase, addr(0, 0, 1, 0), None, SimTime::ZERO).unwrap();
    let older = sim.preload(OpKind::Read, addr(0, 0, 0, 0), None, SimTime::from_ns(1_000)).unwrap();
    let younger =
        sim.preload(OpKind::Read, addr(0, 1, 0, 0), None, SimTime::from_ns(2_000)).unwrap();
    sim.run_to_exhaustion();
    let acks = sim.take_acks();
    let order: Vec<_> = acks.iter().map(|a| a.request).collect();
    assert_eq!(order, vec![younger, erase, older]);
}

#[test]
fn same_page_read_after_program_serializes_and_sees_the_data() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 29);
    let target = addr(0, 0, 1, 4);
    let pattern = payload(&cfg, 0x5C);
    sim.preload(OpKind::Program, target, pattern.clone(), SimTime::ZERO).unwrap();
    sim.preload(OpKind::Read, target, None, SimTime::from_ns(1)).unwrap();
    sim.run_to_exhaustion();
    let acks = sim.take_acks();
    assert_eq!(acks.len(), 2);
    assert_eq!(acks[0].kind, OpKind::Program);
    let read_ack = &acks[1];
    assert_eq!(read_ack.kind, OpKind::Read);
    assert_eq!(read_ack.data.as_deref(), pattern.as_deref().map(|v| v.as_slice()));
    // The read could not start before the program resolved.
    assert!(read_ack.t_complete_sim > acks[0].t_complete_sim);
}

#[test]
fn disjoint_pages_in_a_block_are_not_hazard_serialized() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 31);
    sim.preload(OpKind::Program, addr(0, 0, 1, 0), payload(&cfg, 1), SimTime::ZERO).unwrap();
    let read = sim.preload(OpKind::Read, addr(0, 0, 1, 1), None, SimTime::from_ns(1)).unwrap();
    sim.run_to_exhaustion();
    let events = sim.take_event_log();
    let acks = sim.take_acks();
    let program_done = acks.iter().find(|a| a.kind == OpKind::Program).unwrap().t_complete_sim;
    // The read starts its bus phases long before the program resolves; only
    // the shared chip serializes the two array phases.
    let read_start = events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::PhaseStart { request, .. } if request == read => Some(e.time),
            _ => None,
        })
        .expect("read issued");
    assert!(read_start < program_done, "read was hazard-blocked");
}

#[test]
fn submit_guards_bounds_payload_and_depth() {
    let mut cfg = det_config(small_geometry());
    cfg.controller.queue_depth = 4;
    let mut sim = Simulator::new_vt(&cfg, 37);
    assert!(matches!(
        sim.submit(OpKind::Read, addr(0, 0, 99, 0), None, SimTime::ZERO),
        Err(SubmitError::OutOfBounds(_))
    ));
    assert!(matches!(
        sim.submit(OpKind::Program, addr(0, 0, 0, 0), None, SimTime::ZERO),
        Err(SubmitError::BadPayload(_))
    ));
    for i in 0..4 {
        sim.submit(OpKind::Read, addr(0, 0, 0, i), None, SimTime::ZERO).unwrap();
    }
    assert!(matches!(
        sim.submit(OpKind::Read, addr(0, 0, 0, 7), None, SimTime::ZERO),
        Err(SubmitError::QueueFull)
    ));
}

#[test]
fn internal_faults_fail_the_status_check() {
    let mut cfg = det_config(small_geometry());
    cfg.fault.p_program_internal = 1.0;
    cfg.fault.p_erase_internal = 1.0;
    let mut sim = Simulator::new_vt(&cfg, 41);
    let pattern = payload(&cfg, 0x77);
    sim.preload(OpKind::Program, addr(0, 0, 0, 0), pattern.clone(), SimTime::ZERO).unwrap();
    sim.preload(OpKind::Erase, addr(0, 1, 0, 0), None, SimTime::ZERO).unwrap();
    sim.run_to_exhaustion();
    let acks = sim.take_acks();
    assert!(acks.iter().all(|a| a.status == AckStatus::Fail));
    // The programmed page is corrupted beyond the detection threshold.
    let flash = sim.flash().lock().unwrap();
    let (data, state) = flash.read_page(addr(0, 0, 0, 0)).unwrap();
    assert_eq!(state, AbstractPageState::ProgrammedDataNotOk);
    assert!(
        bit_difference(&data, pattern.as_ref().unwrap())
            > cfg.fault.program_bitdiff_threshold as u64
    );
}

#[test]
fn program_onto_unprogrammable_page_fails_without_state_change() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 43);
    sim.flash()
        .lock()
        .unwrap()
        .set_state(addr(0, 0, 0, 0), AbstractPageState::ErasedNotProgrammable, None)
        .unwrap();
    sim.preload(OpKind::Program, addr(0, 0, 0, 0), payload(&cfg, 0xEE), SimTime::ZERO).unwrap();
    sim.run_to_exhaustion();
    let acks = sim.take_acks();
    assert_eq!(acks[0].status, AckStatus::Fail);
    let (data, state) = sim.flash().lock().unwrap().read_page(addr(0, 0, 0, 0)).unwrap();
    assert_eq!(state, AbstractPageState::ErasedNotProgrammable);
    assert!(data.iter().all(|&b| b == 0xFF));
}

#[test]
fn power_failure_before_any_request_leaves_the_array_untouched() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 47);
    let before = sim.flash().lock().unwrap().content_hash();
    sim.schedule_power_failure(SimTime::from_ns(10)).unwrap();
    sim.preload(OpKind::Program, addr(0, 0, 0, 0), payload(&cfg, 1), SimTime::from_ns(1_000_000))
        .unwrap();
    sim.run_to_exhaustion();
    assert!(sim.is_halted());
    assert_eq!(sim.take_acks().len(), 0);
    assert_eq!(sim.take_drops().len(), 1);
    assert_eq!(sim.flash().lock().unwrap().content_hash(), before);
}

#[test]
fn power_failure_during_program_lands_in_a_fault_state() {
    // Degenerate weights pin the post-failure state to programmed-data-ok.
    let mut cfg = det_config(small_geometry());
    cfg.fault.pf_program_weights = [0.0, 0.0, 1.0, 0.0];
    let mut sim = Simulator::new_vt(&cfg, 53);
    let pattern = payload(&cfg, 0xBD);
    sim.preload(OpKind::Program, addr(0, 0, 0, 0), pattern.clone(), SimTime::ZERO).unwrap();
    // Program array phase spans roughly [cmd+xfer, cmd+xfer+250us].
    let mid_busy = cfg.timing.cycles_to_ns(cfg.timing.cmd_addr_cycles)
        + cfg.timing.transfer_time(cfg.geometry.page_size())
        + 100_000;
    sim.schedule_power_failure(SimTime::from_ns(mid_busy)).unwrap();
    sim.run_to_exhaustion();
    assert!(sim.is_halted());
    assert!(sim.take_acks().is_empty(), "power failure suppresses the ack");
    assert_eq!(sim.take_drops().len(), 1);
    let (data, state) = sim.flash().lock().unwrap().read_page(addr(0, 0, 0, 0)).unwrap();
    assert_eq!(state, AbstractPageState::ProgrammedDataOk);
    assert_eq!(&data, pattern.as_ref().unwrap().as_ref());
}

#[test]
fn power_failure_during_read_changes_no_page_state() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 59);
    sim.preload(OpKind::Program, addr(0, 0, 0, 0), payload(&cfg, 0x3E), SimTime::ZERO).unwrap();
    sim.run_to_exhaustion();
    assert_eq!(sim.take_acks().len(), 1);
    let before = sim.flash().lock().unwrap().content_hash();

    sim.preload(OpKind::Read, addr(0, 0, 0, 0), None, sim.now()).unwrap();
    sim.schedule_power_failure(sim.now().add_ns(60_000)).unwrap(); // mid array phase
    sim.run_to_exhaustion();
    assert!(sim.is_halted());
    assert_eq!(sim.flash().lock().unwrap().content_hash(), before);
    assert_eq!(sim.take_drops().len(), 1);
}

#[test]
fn reboot_requires_a_halt_and_preserves_contents() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 61);
    assert!(matches!(sim.reboot(), Err(SimError::NotHalted)));

    let pattern = payload(&cfg, 0x99);
    sim.preload(OpKind::Program, addr(0, 0, 3, 3), pattern.clone(), SimTime::ZERO).unwrap();
    sim.run_to_exhaustion();
    sim.schedule_power_failure(sim.now().add_ns(1)).unwrap();
    sim.run_to_exhaustion();
    assert!(sim.is_halted());

    sim.reboot().unwrap();
    assert_eq!(sim.now(), SimTime::ZERO);
    assert!(!sim.is_halted());
    // Non-volatile contents survive; the new epoch accepts requests at t=0.
    sim.preload(OpKind::Read, addr(0, 0, 3, 3), None, SimTime::ZERO).unwrap();
    sim.run_to_exhaustion();
    let acks = sim.take_acks();
    assert_eq!(acks[0].data.as_deref(), pattern.as_deref().map(|v| v.as_slice()));
}

#[test]
fn live_submissions_are_stamped_on_receipt() {
    let cfg = det_config(small_geometry());
    let mut sim = Simulator::new_vt(&cfg, 67);
    let handle = sim.host_handle();
    let submitter = std::thread::spawn(move || {
        handle.submit(OpKind::Read, PageAddress::new(0, 0, 0, 0), None).unwrap()
    });
    // Step until the submission lands and completes.
    let mut acks = Vec::new();
    for _ in 0..10_000 {
        sim.run_step();
        acks = sim.take_acks();
        if !acks.is_empty() {
            break;
        }
        std::thread::yield_now();
    }
    let id = submitter.join().unwrap();
    assert_eq!(acks.len(), 1);
    assert_eq!(acks[0].request, id);
    assert_eq!(acks[0].t_issue, SimTime::ZERO); // stamped at receipt, engine at t=0
}
