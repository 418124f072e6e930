//! Event-driven simulation core: simulated time, the event queue, and the
//! engine that drives requests through the controller, fault model, and
//! transfer executor.
//!
//! Simulated time is nanoseconds from run start. Events are totally ordered
//! by (time, insertion seq); equal-time events pop in insertion order, which
//! makes replays with a fixed seed byte-identical in virtual-time mode.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use thiserror::Error;

use crate::timing::PhaseKind;

/// Nanoseconds of simulated time since the start of the current run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }

    pub fn as_ns(self) -> u64 {
        self.0
    }

    pub fn add_ns(self, ns: u64) -> Self {
        SimTime(self.0 + ns)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identity of one FTL request for the lifetime of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identity of one bulk data-transfer task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Status carried by an acknowledgement. Power-failure drops never ack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckStatus {
    Ok,
    Fail,
}

impl AckStatus {
    pub fn name(self) -> &'static str {
        match self {
            AckStatus::Ok => "OK",
            AckStatus::Fail => "Fail",
        }
    }
}

/// A schedulable hardware unit: one flash bus or one chip on a bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResourceId {
    Bus(u32),
    Chip(u32, u32),
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceId::Bus(b) => write!(f, "bus{b}"),
            ResourceId::Chip(b, c) => write!(f, "chip{b}.{c}"),
        }
    }
}

/// Observability marker for a request moving between controller queues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueStage {
    Issued,
    Retired,
}

impl QueueStage {
    pub fn name(self) -> &'static str {
        match self {
            QueueStage::Issued => "issued",
            QueueStage::Retired => "retired",
        }
    }
}

/// The seven event classes. `AckDeparture` is the only externally visible
/// kind; everything else is internal bookkeeping or an observability marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    RequestArrival { request: RequestId },
    AckDeparture { request: RequestId, status: AckStatus },
    QueueMove { request: RequestId, stage: QueueStage },
    PhaseStart { request: RequestId, phase: usize, kind: PhaseKind, resource: ResourceId },
    PhaseEnd { request: RequestId, phase: usize, kind: PhaseKind, resource: ResourceId },
    TransferComplete { task: TaskId },
    PowerFailure,
}

/// A timestamped simulation occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    /// One-line text form used by the event log.
    pub fn log_line(&self) -> String {
        let body = match self.kind {
            EventKind::RequestArrival { request } => format!("arrival req={request}"),
            EventKind::AckDeparture { request, status } => {
                format!("ack req={request} status={}", status.name())
            }
            EventKind::QueueMove { request, stage } => {
                format!("queue_move req={request} stage={}", stage.name())
            }
            EventKind::PhaseStart { request, phase, kind, resource } => {
                format!("phase_start req={request} idx={phase} kind={} res={resource}", kind.name())
            }
            EventKind::PhaseEnd { request, phase, kind, resource } => {
                format!("phase_end req={request} idx={phase} kind={} res={resource}", kind.name())
            }
            EventKind::TransferComplete { task } => format!("transfer_complete task={task}"),
            EventKind::PowerFailure => "power_failure".to_string(),
        };
        format!("{} {} {}", self.time, self.seq, body)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule event at {event} before current time {now}")]
    PastTime { event: SimTime, now: SimTime },
    #[error("engine is halted by a power failure; reboot first")]
    Halted,
    #[error("reboot requires a halted engine")]
    NotHalted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct QueuedEvent {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the minimal (time, seq).
        other.time.cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Future events keyed by (time, seq). Ties resolve FIFO by insertion seq.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<QueuedEvent>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue::default()
    }

    /// Inserts an event, refusing times before `now`. Returns the assigned
    /// insertion seq, which doubles as the event id.
    pub fn schedule(&mut self, now: SimTime, time: SimTime, kind: EventKind) -> Result<u64, SimError> {
        if time < now {
            return Err(SimError::PastTime { event: time, now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(QueuedEvent { time, seq, kind });
        Ok(seq)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|q| Event { time: q.time, seq: q.seq, kind: q.kind })
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|q| q.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }
}

/// Clock discipline of a run: pure simulation or wall-clock-aligned release.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Virtual,
    RealTime,
}

/// A completed request as delivered to the host.
#[derive(Debug, Clone)]
pub struct Ack {
    pub request: RequestId,
    pub kind: crate::timing::OpKind,
    pub addr: crate::flash::PageAddress,
    pub t_issue: SimTime,
    pub t_complete_sim: SimTime,
    pub status: AckStatus,
    /// Page contents for reads.
    pub data: Option<Vec<u8>>,
}

/// A request terminated by a power failure; no ack is ever delivered.
#[derive(Debug, Clone, Copy)]
pub struct DroppedRequest {
    pub request: RequestId,
    pub t_issue: SimTime,
    pub drop_time: SimTime,
}

/// Cross-thread submission into a live engine.
pub enum HostMsg {
    Submit {
        kind: crate::timing::OpKind,
        addr: crate::flash::PageAddress,
        data: Option<std::sync::Arc<Vec<u8>>>,
        reply: std::sync::mpsc::Sender<Result<RequestId, crate::controller::SubmitError>>,
    },
}

/// Host-side handle for submitting requests to a running engine. Live
/// submissions are timestamped by the engine when it drains its inbound
/// queue; trace replays carry their own timestamps instead.
#[derive(Clone)]
pub struct SimHandle {
    tx: std::sync::mpsc::Sender<HostMsg>,
}

impl SimHandle {
    pub fn submit(
        &self,
        kind: crate::timing::OpKind,
        addr: crate::flash::PageAddress,
        data: Option<std::sync::Arc<Vec<u8>>>,
    ) -> Result<RequestId, crate::controller::SubmitError> {
        let (reply, rx) = std::sync::mpsc::channel();
        self.tx
            .send(HostMsg::Submit { kind, addr, data, reply })
            .map_err(|_| crate::controller::SubmitError::Halted)?;
        rx.recv().map_err(|_| crate::controller::SubmitError::Halted)?
    }
}

enum ExecBackend {
    /// Virtual time: transfers execute inline at enqueue.
    Inline(crate::executor::FlashWorkQueue),
    /// Real time: transfers run on the dedicated execution thread.
    Threaded(crate::executor::ThreadedExecutor),
}

enum AckSink {
    Collect(Vec<Ack>),
    Channel(std::sync::mpsc::Sender<Ack>),
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives the per-chip RNG stream seed from the run seed.
pub fn chip_stream_seed(seed: u64, chip_index: usize) -> u64 {
    splitmix64(seed ^ (chip_index as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407))
}

/// The event-driven engine. Owns the event queue, the controller, the fault
/// model, and the transfer backend; hands externally visible events to the
/// alignment unit (real time) or collects them (virtual time).
pub struct Simulator {
    mode: Mode,
    geometry: crate::flash::Geometry,
    timing: crate::timing::TimingConfig,
    queue_depth: usize,
    queue: EventQueue,
    now: SimTime,
    ctrl: crate::controller::Controller,
    resources: Vec<ResourceId>,
    flash: std::sync::Arc<std::sync::Mutex<crate::flash::FlashArray>>,
    fault: crate::fault::FaultEngine,
    chip_rngs: Vec<rand_chacha::ChaCha8Rng>,
    next_request: u64,
    next_task: u64,
    exec: ExecBackend,
    completions: std::collections::HashMap<TaskId, crate::executor::Completion>,
    ack_sink: AckSink,
    halted: bool,
    drops: Vec<DroppedRequest>,
    event_log: Vec<Event>,
    inbound: Option<std::sync::mpsc::Receiver<HostMsg>>,
    inbound_tx: Option<std::sync::mpsc::Sender<HostMsg>>,
    scheduled_events: u64,
    processed_events: u64,
}

impl Simulator {
    /// Builds a virtual-time engine: single-threaded, deterministic for a
    /// given (config, seed, submission sequence).
    pub fn new_vt(cfg: &crate::config::SimConfig, seed: u64) -> Self {
        let flash = std::sync::Arc::new(std::sync::Mutex::new(crate::flash::FlashArray::new(
            cfg.geometry,
        )));
        Self::build(cfg, seed, flash, ExecBackend::Inline(crate::executor::FlashWorkQueue::new()), AckSink::Collect(Vec::new()), Mode::Virtual)
    }

    /// Builds a real-time engine around an already-spawned execution unit
    /// and an acknowledgement channel into the alignment unit.
    pub fn new_rt(
        cfg: &crate::config::SimConfig,
        seed: u64,
        flash: std::sync::Arc<std::sync::Mutex<crate::flash::FlashArray>>,
        exec: crate::executor::ThreadedExecutor,
        ack_tx: std::sync::mpsc::Sender<Ack>,
    ) -> Self {
        Self::build(cfg, seed, flash, ExecBackend::Threaded(exec), AckSink::Channel(ack_tx), Mode::RealTime)
    }

    fn build(
        cfg: &crate::config::SimConfig,
        seed: u64,
        flash: std::sync::Arc<std::sync::Mutex<crate::flash::FlashArray>>,
        exec: ExecBackend,
        ack_sink: AckSink,
        mode: Mode,
    ) -> Self {
        let ctrl = crate::controller::Controller::new(cfg.geometry);
        let resources = ctrl.all_resources();
        let chip_rngs = (0..cfg.geometry.chip_count())
            .map(|i| {
                use rand::SeedableRng;
                rand_chacha::ChaCha8Rng::seed_from_u64(chip_stream_seed(seed, i))
            })
            .collect();
        Simulator {
            mode,
            geometry: cfg.geometry,
            timing: cfg.timing,
            queue_depth: cfg.controller.queue_depth,
            queue: EventQueue::new(),
            now: SimTime::ZERO,
            ctrl,
            resources,
            flash,
            fault: crate::fault::FaultEngine::new(cfg.fault),
            chip_rngs,
            next_request: 0,
            next_task: 0,
            exec,
            completions: std::collections::HashMap::new(),
            ack_sink,
            halted: false,
            drops: Vec::new(),
            event_log: Vec::new(),
            inbound: None,
            inbound_tx: None,
            scheduled_events: 0,
            processed_events: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Simulated time of the most recently processed event; zero initially.
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn flash(&self) -> &std::sync::Arc<std::sync::Mutex<crate::flash::FlashArray>> {
        &self.flash
    }

    pub fn event_log(&self) -> &[Event] {
        &self.event_log
    }

    pub fn take_event_log(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.event_log)
    }

    pub fn take_drops(&mut self) -> Vec<DroppedRequest> {
        std::mem::take(&mut self.drops)
    }

    /// Collected acks (virtual-time mode only).
    pub fn take_acks(&mut self) -> Vec<Ack> {
        match &mut self.ack_sink {
            AckSink::Collect(v) => std::mem::take(v),
            AckSink::Channel(_) => Vec::new(),
        }
    }

    pub fn scheduled_events(&self) -> u64 {
        self.scheduled_events
    }

    pub fn processed_events(&self) -> u64 {
        self.processed_events
    }

    /// Creates (once) the cross-thread submission handle for live use.
    pub fn host_handle(&mut self) -> SimHandle {
        if self.inbound_tx.is_none() {
            let (tx, rx) = std::sync::mpsc::channel();
            self.inbound = Some(rx);
            self.inbound_tx = Some(tx);
        }
        SimHandle { tx: self.inbound_tx.as_ref().expect("created above").clone() }
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) -> u64 {
        self.scheduled_events += 1;
        self.queue.schedule(self.now, time, kind).expect("engine schedules into the future")
    }

    fn alloc_request(
        &mut self,
        kind: crate::timing::OpKind,
        addr: crate::flash::PageAddress,
        data: Option<std::sync::Arc<Vec<u8>>>,
        t_issue: SimTime,
    ) -> RequestId {
        use crate::controller::{FlashRequest, RequestState, RequestStatus};
        let id = RequestId(self.next_request);
        self.next_request += 1;
        let chip = self.geometry.chip_index(addr.bus, addr.chip);
        let page_size = self.geometry.page_size();
        let rng = &mut self.chip_rngs[chip];
        let phases = crate::timing::phase_plan(&self.timing, kind, addr, page_size, rng);
        let internal_fault = match kind {
            crate::timing::OpKind::Program | crate::timing::OpKind::Erase => {
                self.fault.roll_internal_fault(kind, rng)
            }
            crate::timing::OpKind::Read => false,
        };
        let req = FlashRequest {
            id,
            kind,
            addr,
            data,
            t_issue,
            t_complete_sim: None,
            status: RequestStatus::Pending,
        };
        self.ctrl.register(RequestState::new(req, phases, internal_fault));
        id
    }

    /// Live submission: checks the queue-depth bound and schedules the
    /// arrival at `max(now, t_issue)`.
    pub fn submit(
        &mut self,
        kind: crate::timing::OpKind,
        addr: crate::flash::PageAddress,
        data: Option<std::sync::Arc<Vec<u8>>>,
        t_issue: SimTime,
    ) -> Result<RequestId, crate::controller::SubmitError> {
        if self.halted {
            return Err(crate::controller::SubmitError::Halted);
        }
        if self.ctrl.outstanding() >= self.queue_depth {
            return Err(crate::controller::SubmitError::QueueFull);
        }
        self.ctrl.validate_submit(kind, addr, data.as_ref())?;
        let id = self.alloc_request(kind, addr, data, t_issue);
        let arrival = self.now.max(t_issue);
        self.schedule(arrival, EventKind::RequestArrival { request: id });
        Ok(id)
    }

    /// Trace-replay admission: arrivals keep their trace timestamps and the
    /// live queue-depth bound does not apply (the trace is the authority on
    /// when each request was issued).
    pub fn preload(
        &mut self,
        kind: crate::timing::OpKind,
        addr: crate::flash::PageAddress,
        data: Option<std::sync::Arc<Vec<u8>>>,
        t_issue: SimTime,
    ) -> Result<RequestId, crate::controller::SubmitError> {
        if self.halted {
            return Err(crate::controller::SubmitError::Halted);
        }
        self.ctrl.validate_submit(kind, addr, data.as_ref())?;
        let id = self.alloc_request(kind, addr, data, t_issue);
        let arrival = self.now.max(t_issue);
        self.schedule(arrival, EventKind::RequestArrival { request: id });
        Ok(id)
    }

    /// Queues an external power failure at `t`.
    pub fn schedule_power_failure(&mut self, t: SimTime) -> Result<(), SimError> {
        self.queue.schedule(self.now, t, EventKind::PowerFailure)?;
        self.scheduled_events += 1;
        Ok(())
    }

    /// Clears volatile state after a power failure; array contents persist.
    /// The next epoch starts at simulated time zero.
    pub fn reboot(&mut self) -> Result<(), SimError> {
        if !self.halted {
            return Err(SimError::NotHalted);
        }
        self.ctrl = crate::controller::Controller::new(self.geometry);
        self.queue = EventQueue::new();
        self.completions.clear();
        self.next_request = 0;
        self.next_task = 0;
        self.now = SimTime::ZERO;
        self.halted = false;
        Ok(())
    }

    fn drain_inbound(&mut self) {
        let Some(rx) = &self.inbound else { return };
        let mut msgs = Vec::new();
        while let Ok(msg) = rx.try_recv() {
            msgs.push(msg);
        }
        for msg in msgs {
            match msg {
                HostMsg::Submit { kind, addr, data, reply } => {
                    // Live mode stamps requests on receipt.
                    let result = self.submit(kind, addr, data, self.now);
                    let _ = reply.send(result);
                }
            }
        }
    }

    /// Removes and processes the head event. Returns the processed event, or
    /// `None` when the queue is empty or the engine is halted.
    pub fn run_step(&mut self) -> Option<Event> {
        self.drain_inbound();
        if self.halted {
            return None;
        }
        let event = self.queue.pop()?;
        debug_assert!(event.time >= self.now, "event time regressed");
        self.now = event.time;
        self.processed_events += 1;
        self.event_log.push(event);
        self.process(event);
        Some(event)
    }

    /// Runs until the queue is empty, the engine halts, or the head event
    /// lies beyond `limit`. Returns the number of events processed.
    pub fn run_until(&mut self, limit: SimTime) -> u64 {
        let mut n = 0;
        loop {
            self.drain_inbound();
            if self.halted {
                break;
            }
            match self.queue.peek_time() {
                Some(t) if t <= limit => {
                    self.run_step();
                    n += 1;
                }
                _ => break,
            }
        }
        n
    }

    pub fn run_to_exhaustion(&mut self) -> u64 {
        self.run_until(SimTime::MAX)
    }

    fn process(&mut self, event: Event) {
        use crate::timing::{OpKind, PhaseKind};
        match event.kind {
            EventKind::RequestArrival { request } => {
                self.ctrl.activate(request);
                self.try_issue();
            }
            EventKind::PhaseStart { .. } | EventKind::QueueMove { .. } => {}
            EventKind::PhaseEnd { request, kind, resource, .. } => {
                self.ctrl.on_phase_done(request, resource);
                match kind {
                    PhaseKind::StatusCheck => self.resolve_status(request),
                    PhaseKind::ArrayBusy => {
                        let is_read = self
                            .ctrl
                            .get(request)
                            .map(|s| s.req.kind == OpKind::Read)
                            .unwrap_or(false);
                        if is_read {
                            self.enqueue_dataout(request);
                        }
                    }
                    _ => {}
                }
                self.try_issue();
            }
            EventKind::TransferComplete { task } => {
                let completion = self.wait_completion(task);
                let request = completion.request;
                match completion.direction {
                    crate::executor::Direction::DataIn => {
                        let state = self.ctrl.get_mut(request).expect("transfer owner registered");
                        state.staging = Some(completion.data);
                    }
                    crate::executor::Direction::DataOut => {
                        let state = self.ctrl.get_mut(request).expect("transfer owner registered");
                        state.result = Some(completion.data);
                        self.finish_request(request, AckStatus::Ok);
                    }
                }
                self.try_issue();
            }
            EventKind::AckDeparture { request, status } => {
                let state = self.ctrl.remove(request).expect("acked request registered");
                let ack = Ack {
                    request,
                    kind: state.req.kind,
                    addr: state.req.addr,
                    t_issue: state.req.t_issue,
                    t_complete_sim: self.now,
                    status,
                    data: state.result,
                };
                match &mut self.ack_sink {
                    AckSink::Collect(v) => v.push(ack),
                    AckSink::Channel(tx) => {
                        tx.send(ack).expect("alignment unit alive");
                    }
                }
            }
            EventKind::PowerFailure => self.apply_power_failure(),
        }
    }

    /// Marks a request resolved, emits the retire marker, and schedules its
    /// acknowledgement at the current simulated time.
    fn finish_request(&mut self, id: RequestId, status: AckStatus) {
        use crate::controller::RequestStatus;
        let st = match status {
            AckStatus::Ok => RequestStatus::Ok,
            AckStatus::Fail => RequestStatus::Fail,
        };
        self.ctrl.complete(id, st, self.now);
        self.schedule(self.now, EventKind::QueueMove { request: id, stage: QueueStage::Retired });
        self.schedule(self.now, EventKind::AckDeparture { request: id, status });
    }

    /// Resolves an erase/program outcome when its status check finishes.
    fn resolve_status(&mut self, id: RequestId) {
        use crate::flash::AbstractPageState;
        use crate::timing::OpKind;
        let (kind, addr, internal_fault, staging) = {
            let state = self.ctrl.get_mut(id).expect("status check for registered request");
            (state.req.kind, state.req.addr, state.internal_fault, state.staging.take())
        };
        let chip = self.geometry.chip_index(addr.bus, addr.chip);
        let status = match kind {
            OpKind::Program => {
                let intended = staging.expect("data-in transfer completed before status check");
                let mut flash = self.flash.lock().expect("flash lock");
                let page_state = flash.page_state(addr).expect("submit validated bounds");
                if page_state != AbstractPageState::ErasedProgrammable {
                    // The attempt fails: an unprogrammable page is left
                    // untouched, while programming over existing data
                    // corrupts the page.
                    if !page_state.is_erased() {
                        let rng = &mut self.chip_rngs[chip];
                        let corrupted = self.fault.corrupt(&intended, rng);
                        flash
                            .set_state(addr, AbstractPageState::ProgrammedDataNotOk, Some(&corrupted))
                            .expect("bounds validated");
                    }
                    AckStatus::Fail
                } else {
                    let rng = &mut self.chip_rngs[chip];
                    self.fault
                        .apply_program_outcome(&mut flash, addr, &intended, internal_fault, false, rng)
                        .expect("page checked programmable");
                    if internal_fault {
                        AckStatus::Fail
                    } else {
                        AckStatus::Ok
                    }
                }
            }
            OpKind::Erase => {
                let mut flash = self.flash.lock().expect("flash lock");
                let rng = &mut self.chip_rngs[chip];
                self.fault
                    .apply_erase_outcome(&mut flash, addr, internal_fault, false, rng)
                    .expect("bounds validated at submit");
                if internal_fault {
                    AckStatus::Fail
                } else {
                    AckStatus::Ok
                }
            }
            OpKind::Read => unreachable!("reads have no status check"),
        };
        self.finish_request(id, status);
    }

    /// At the end of a read's array phase, hands the outgoing transfer to the
    /// execution unit with the earliest possible completion as its deadline.
    /// If the bus is busy the deadline is revised upward when the phase
    /// actually issues.
    fn enqueue_dataout(&mut self, id: RequestId) {
        let addr = self.ctrl.get(id).expect("registered").req.addr;
        let task_id = TaskId(self.next_task);
        self.next_task += 1;
        let estimate = self.now.add_ns(self.timing.transfer_time(self.geometry.page_size()));
        let task = crate::executor::TransferTask {
            id: task_id,
            direction: crate::executor::Direction::DataOut,
            addr,
            request: id,
            deadline: estimate,
            enqueue_seq: 0,
            state: crate::executor::TaskState::Queued,
            payload: None,
        };
        self.ctrl.get_mut(id).expect("registered").dataout_task = Some(task_id);
        self.exec_enqueue(task);
    }

    fn exec_enqueue(&mut self, task: crate::executor::TransferTask) {
        match &mut self.exec {
            ExecBackend::Inline(q) => {
                q.enqueue_transfer(task).expect("engine assigns unique task ids");
                self.drain_inline();
            }
            ExecBackend::Threaded(t) => t.send(crate::executor::ExecMsg::Enqueue(task)),
        }
    }

    fn exec_update_deadline(&mut self, task: TaskId, deadline: SimTime) {
        match &mut self.exec {
            ExecBackend::Inline(q) => match q.update_deadline(task, deadline) {
                // Inline tasks execute at enqueue, so a later revision often
                // finds the task already retired; that is expected.
                Ok(()) | Err(crate::executor::ExecError::UnknownTask(_)) => {}
                Err(e) => panic!("deadline update failed: {e}"),
            },
            ExecBackend::Threaded(t) => {
                t.send(crate::executor::ExecMsg::UpdateDeadline(task, deadline))
            }
        }
    }

    fn drain_inline(&mut self) {
        let ExecBackend::Inline(q) = &mut self.exec else { return };
        while q.next_task().expect("engine never leaves a task running").is_some() {
            let completion = q.execute(&self.flash).expect("task is running");
            self.completions.insert(completion.task, completion);
        }
    }

    /// Blocks until the executor has finished `task`. Inline tasks are
    /// already done; threaded completions are drained in arrival order.
    fn wait_completion(&mut self, task: TaskId) -> crate::executor::Completion {
        if let Some(c) = self.completions.remove(&task) {
            return c;
        }
        match &mut self.exec {
            ExecBackend::Inline(_) => panic!("inline transfer {task} missing its completion"),
            ExecBackend::Threaded(t) => loop {
                let c = t
                    .replies
                    .recv_timeout(std::time::Duration::from_secs(10))
                    .expect("execution unit stalled");
                if c.task == task {
                    return c;
                }
                self.completions.insert(c.task, c);
            },
        }
    }

    /// Issues ready phases onto idle resources, oldest arrival first.
    fn try_issue(&mut self) {
        for i in 0..self.resources.len() {
            let resource = self.resources[i];
            if !self.ctrl.resource_free(resource) {
                continue;
            }
            if let Some((id, idx)) = self.ctrl.select_next_phase(resource) {
                self.issue_phase(id, idx, resource);
            }
        }
    }

    fn issue_phase(&mut self, id: RequestId, idx: usize, resource: ResourceId) {
        let (phase, first_issue, dataout_task, payload) = {
            let state = self.ctrl.get(id).expect("issuing registered request");
            (
                state.phases[idx],
                state.next_unissued == 0,
                state.dataout_task,
                state.req.data.clone(),
            )
        };
        self.ctrl.mark_issued(id, resource);
        let end = self.now.add_ns(phase.duration_ns);
        if first_issue {
            self.schedule(self.now, EventKind::QueueMove { request: id, stage: QueueStage::Issued });
        }
        self.schedule(
            self.now,
            EventKind::PhaseStart { request: id, phase: idx, kind: phase.kind, resource },
        );
        self.schedule(
            end,
            EventKind::PhaseEnd { request: id, phase: idx, kind: phase.kind, resource },
        );
        match phase.kind {
            crate::timing::PhaseKind::DataIn => {
                let task_id = TaskId(self.next_task);
                self.next_task += 1;
                let addr = self.ctrl.get(id).expect("registered").req.addr;
                let task = crate::executor::TransferTask {
                    id: task_id,
                    direction: crate::executor::Direction::DataIn,
                    addr,
                    request: id,
                    deadline: end,
                    enqueue_seq: 0,
                    state: crate::executor::TaskState::Queued,
                    payload: Some(payload.expect("programs carry payloads")),
                };
                self.exec_enqueue(task);
                self.schedule(end, EventKind::TransferComplete { task: task_id });
            }
            crate::timing::PhaseKind::DataOut => {
                let task_id = dataout_task.expect("transfer enqueued at array-busy end");
                self.exec_update_deadline(task_id, end);
                self.schedule(end, EventKind::TransferComplete { task: task_id });
            }
            _ => {}
        }
    }

    /// Resolves every in-flight erase/program through the fault model, drops
    /// all unacked requests, clears the queues, and halts the engine.
    fn apply_power_failure(&mut self) {
        use crate::flash::AbstractPageState;
        use crate::timing::OpKind;
        let states = self.ctrl.drain_all();
        for state in states {
            if !state.complete && state.array_busy_started() {
                let addr = state.req.addr;
                let chip = self.geometry.chip_index(addr.bus, addr.chip);
                match state.req.kind {
                    OpKind::Program => {
                        let mut flash = self.flash.lock().expect("flash lock");
                        let page_state = flash.page_state(addr).expect("bounds validated");
                        if page_state == AbstractPageState::ErasedProgrammable {
                            let intended =
                                state.staging.expect("data-in completed before array phase");
                            let rng = &mut self.chip_rngs[chip];
                            self.fault
                                .apply_program_outcome(&mut flash, addr, &intended, false, true, rng)
                                .expect("page checked programmable");
                        }
                        // A non-programmable target would have failed anyway;
                        // the interrupted attempt leaves it unchanged.
                    }
                    OpKind::Erase => {
                        let mut flash = self.flash.lock().expect("flash lock");
                        let rng = &mut self.chip_rngs[chip];
                        self.fault
                            .apply_erase_outcome(&mut flash, addr, false, true, rng)
                            .expect("bounds validated");
                    }
                    OpKind::Read => {}
                }
            }
            // Everything still registered loses its ack, including requests
            // that resolved at this very instant.
            self.drops.push(DroppedRequest {
                request: state.req.id,
                t_issue: state.req.t_issue,
                drop_time: self.now.max(state.req.t_issue),
            });
        }
        self.queue.clear();
        self.completions.clear();
        match &mut self.exec {
            ExecBackend::Inline(q) => q.clear_queued(),
            ExecBackend::Threaded(t) => t.send(crate::executor::ExecMsg::Clear),
        }
        self.halted = true;
    }

    /// Hands the threaded execution unit back for shutdown and stats.
    pub fn into_executor(self) -> Option<crate::executor::ThreadedExecutor> {
        match self.exec {
            ExecBackend::Inline(_) => None,
            ExecBackend::Threaded(t) => Some(t),
        }
    }
}
