//! Out-of-order request scheduler over buses and chips.
//!
//! Requests decompose into phases that queue per resource: bus phases on the
//! target chip's bus, array phases on the chip itself. Among ready phases a
//! resource serves the oldest-arrived request first, so independent requests
//! interleave while conflicting ones serialize. Conflicts are page-level,
//! widening to block-level when an erase is involved.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::flash::{Geometry, PageAddress};
use crate::sim::{RequestId, ResourceId, SimTime, TaskId};
use crate::timing::{OpKind, Phase, PhaseKind, Resource};

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("request queue is full")]
    QueueFull,
    #[error("address {0} out of bounds")]
    OutOfBounds(PageAddress),
    #[error("bad payload: {0}")]
    BadPayload(String),
    #[error("engine is halted by a power failure")]
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestStatus {
    Pending,
    Ok,
    Fail,
}

/// One FTL-issued read/program/erase.
#[derive(Debug, Clone)]
pub struct FlashRequest {
    pub id: RequestId,
    pub kind: OpKind,
    pub addr: PageAddress,
    pub data: Option<Arc<Vec<u8>>>,
    pub t_issue: SimTime,
    pub t_complete_sim: Option<SimTime>,
    pub status: RequestStatus,
}

/// Scheduler-side lifecycle of one request.
#[derive(Debug)]
pub struct RequestState {
    pub req: FlashRequest,
    pub phases: Vec<Phase>,
    /// Index of the first phase not yet issued.
    pub next_unissued: usize,
    /// Phase currently occupying a resource.
    pub running_phase: Option<usize>,
    /// Rolled at plan time; resolved at the status check.
    pub internal_fault: bool,
    /// Stamped when the arrival event is processed.
    pub arrival_seq: Option<u64>,
    /// Bytes landed by the DataIn transfer, committed on program success.
    pub staging: Option<Vec<u8>>,
    /// Bytes landed by the DataOut transfer for reads.
    pub result: Option<Vec<u8>>,
    pub dataout_task: Option<TaskId>,
    pub complete: bool,
}

impl RequestState {
    pub fn new(req: FlashRequest, phases: Vec<Phase>, internal_fault: bool) -> Self {
        RequestState {
            req,
            phases,
            next_unissued: 0,
            running_phase: None,
            internal_fault,
            arrival_seq: None,
            staging: None,
            result: None,
            dataout_task: None,
            complete: false,
        }
    }

    pub fn arrived(&self) -> bool {
        self.arrival_seq.is_some()
    }

    /// True once the ArrayBusy phase has been issued; a power failure then
    /// leaves the target page(s) in a fault-model state.
    pub fn array_busy_started(&self) -> bool {
        self.phases
            .iter()
            .position(|p| p.kind == PhaseKind::ArrayBusy)
            .map(|i| i < self.next_unissued)
            .unwrap_or(false)
    }

    fn next_phase(&self) -> Option<&Phase> {
        if self.complete || self.running_phase.is_some() {
            return None;
        }
        self.phases.get(self.next_unissued)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hazard {
    Ready,
    Blocked,
}

/// Scheduler state: request table, per-chip arrival queues, resource slots.
#[derive(Debug)]
pub struct Controller {
    geometry: Geometry,
    requests: BTreeMap<RequestId, RequestState>,
    /// Arrived, incomplete requests per flat chip index, in arrival order.
    pending: Vec<Vec<RequestId>>,
    next_arrival_seq: u64,
    bus_slot: Vec<Option<(RequestId, usize)>>,
    chip_slot: Vec<Option<(RequestId, usize)>>,
}

impl Controller {
    pub fn new(geometry: Geometry) -> Self {
        Controller {
            geometry,
            requests: BTreeMap::new(),
            pending: vec![Vec::new(); geometry.chip_count()],
            next_arrival_seq: 0,
            bus_slot: vec![None; geometry.buses as usize],
            chip_slot: vec![None; geometry.chip_count()],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// Requests registered and not yet acked or dropped.
    pub fn outstanding(&self) -> usize {
        self.requests.len()
    }

    pub fn validate_submit(
        &self,
        kind: OpKind,
        addr: PageAddress,
        data: Option<&Arc<Vec<u8>>>,
    ) -> Result<(), SubmitError> {
        if !self.geometry.contains(addr) {
            return Err(SubmitError::OutOfBounds(addr));
        }
        match (kind, data) {
            (OpKind::Program, Some(d)) => {
                if d.len() != self.geometry.page_size() {
                    return Err(SubmitError::BadPayload(format!(
                        "program payload is {} bytes, page size is {}",
                        d.len(),
                        self.geometry.page_size()
                    )));
                }
            }
            (OpKind::Program, None) => {
                return Err(SubmitError::BadPayload("program requires a payload".into()))
            }
            (_, Some(_)) => {
                return Err(SubmitError::BadPayload("only programs carry a payload".into()))
            }
            (_, None) => {}
        }
        Ok(())
    }

    pub fn register(&mut self, state: RequestState) {
        self.requests.insert(state.req.id, state);
    }

    /// Processes a request arrival: stamps the arrival order and enters the
    /// per-chip pending queue.
    pub fn activate(&mut self, id: RequestId) {
        let seq = self.next_arrival_seq;
        self.next_arrival_seq += 1;
        let state = self.requests.get_mut(&id).expect("arrival for registered request");
        debug_assert!(state.arrival_seq.is_none());
        state.arrival_seq = Some(seq);
        let chip = self.geometry.chip_index(state.req.addr.bus, state.req.addr.chip);
        self.pending[chip].push(id);
    }

    pub fn get(&self, id: RequestId) -> Option<&RequestState> {
        self.requests.get(&id)
    }

    pub fn get_mut(&mut self, id: RequestId) -> Option<&mut RequestState> {
        self.requests.get_mut(&id)
    }

    fn conflicts(a: &RequestState, b: &RequestState) -> bool {
        let (x, y) = (a.req.addr, b.req.addr);
        if (x.bus, x.chip, x.block) != (y.bus, y.chip, y.block) {
            return false;
        }
        if a.req.kind == OpKind::Erase || b.req.kind == OpKind::Erase {
            return true;
        }
        x.page == y.page
    }

    /// A request is blocked while an earlier-arrived incomplete request
    /// targets the same page, or the same block when either is an erase.
    pub fn hazard_check(&self, id: RequestId) -> Hazard {
        let me = &self.requests[&id];
        let my_seq = me.arrival_seq.expect("hazard check on arrived request");
        let chip = self.geometry.chip_index(me.req.addr.bus, me.req.addr.chip);
        for other_id in &self.pending[chip] {
            if *other_id == id {
                continue;
            }
            let other = &self.requests[other_id];
            if other.complete {
                continue;
            }
            match other.arrival_seq {
                Some(seq) if seq < my_seq => {
                    if Self::conflicts(me, other) {
                        return Hazard::Blocked;
                    }
                }
                _ => {}
            }
        }
        Hazard::Ready
    }

    fn phase_targets(&self, state: &RequestState, resource: ResourceId) -> bool {
        let addr = state.req.addr;
        match (state.next_phase(), resource) {
            (Some(p), ResourceId::Bus(b)) => p.resource() == Resource::Bus && addr.bus == b,
            (Some(p), ResourceId::Chip(b, c)) => {
                p.resource() == Resource::Chip && addr.bus == b && addr.chip == c
            }
            (None, _) => false,
        }
    }

    /// Among ready phases wanting `resource`, picks the one whose owning
    /// request arrived earliest. The caller guarantees the resource is idle.
    pub fn select_next_phase(&self, resource: ResourceId) -> Option<(RequestId, usize)> {
        let chips: Vec<usize> = match resource {
            ResourceId::Bus(b) => (0..self.geometry.chips_per_bus)
                .map(|c| self.geometry.chip_index(b, c))
                .collect(),
            ResourceId::Chip(b, c) => vec![self.geometry.chip_index(b, c)],
        };
        let mut best: Option<(u64, RequestId, usize)> = None;
        for chip in chips {
            for id in &self.pending[chip] {
                let state = &self.requests[id];
                if !self.phase_targets(state, resource) {
                    continue;
                }
                if self.hazard_check(*id) == Hazard::Blocked {
                    continue;
                }
                let seq = state.arrival_seq.expect("pending requests have arrived");
                if best.map(|(s, _, _)| seq < s).unwrap_or(true) {
                    best = Some((seq, *id, state.next_unissued));
                }
            }
        }
        best.map(|(_, id, phase)| (id, phase))
    }

    pub fn resource_free(&self, resource: ResourceId) -> bool {
        match resource {
            ResourceId::Bus(b) => self.bus_slot[b as usize].is_none(),
            ResourceId::Chip(b, c) => self.chip_slot[self.geometry.chip_index(b, c)].is_none(),
        }
    }

    pub fn all_resources(&self) -> Vec<ResourceId> {
        let mut out: Vec<ResourceId> = (0..self.geometry.buses).map(ResourceId::Bus).collect();
        for b in 0..self.geometry.buses {
            for c in 0..self.geometry.chips_per_bus {
                out.push(ResourceId::Chip(b, c));
            }
        }
        out
    }

    /// Concrete resource a phase of this request occupies.
    pub fn resource_of(&self, state: &RequestState, phase: &Phase) -> ResourceId {
        match phase.resource() {
            Resource::Bus => ResourceId::Bus(state.req.addr.bus),
            Resource::Chip => ResourceId::Chip(state.req.addr.bus, state.req.addr.chip),
        }
    }

    /// Marks the request's next phase as running on `resource`.
    pub fn mark_issued(&mut self, id: RequestId, resource: ResourceId) -> usize {
        let state = self.requests.get_mut(&id).expect("issuing registered request");
        let idx = state.next_unissued;
        debug_assert!(state.running_phase.is_none());
        state.running_phase = Some(idx);
        state.next_unissued = idx + 1;
        match resource {
            ResourceId::Bus(b) => {
                debug_assert!(self.bus_slot[b as usize].is_none());
                self.bus_slot[b as usize] = Some((id, idx));
            }
            ResourceId::Chip(b, c) => {
                let slot = self.geometry.chip_index(b, c);
                debug_assert!(self.chip_slot[slot].is_none());
                self.chip_slot[slot] = Some((id, idx));
            }
        }
        idx
    }

    /// Frees the resource a finished phase was occupying.
    pub fn on_phase_done(&mut self, id: RequestId, resource: ResourceId) {
        let state = self.requests.get_mut(&id).expect("phase end for registered request");
        debug_assert_eq!(state.running_phase, Some(state.next_unissued - 1));
        state.running_phase = None;
        match resource {
            ResourceId::Bus(b) => self.bus_slot[b as usize] = None,
            ResourceId::Chip(b, c) => self.chip_slot[self.geometry.chip_index(b, c)] = None,
        }
    }

    /// Marks a request resolved and leaves the pending queue, releasing any
    /// hazards held against younger requests.
    pub fn complete(&mut self, id: RequestId, status: RequestStatus, t: SimTime) {
        let state = self.requests.get_mut(&id).expect("completing registered request");
        state.complete = true;
        state.req.status = status;
        state.req.t_complete_sim = Some(t);
        let chip = self.geometry.chip_index(state.req.addr.bus, state.req.addr.chip);
        self.pending[chip].retain(|r| *r != id);
    }

    /// Retires an acked request entirely.
    pub fn remove(&mut self, id: RequestId) -> Option<RequestState> {
        self.requests.remove(&id)
    }

    /// Drains every registered request (power failure), in id order.
    pub fn drain_all(&mut self) -> Vec<RequestState> {
        for q in &mut self.pending {
            q.clear();
        }
        self.bus_slot.iter_mut().for_each(|s| *s = None);
        self.chip_slot.iter_mut().for_each(|s| *s = None);
        std::mem::take(&mut self.requests).into_values().collect()
    }
}
