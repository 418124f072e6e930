//! The flash operation execution unit: bulk page copies between request
//! buffers and the simulated array, dispatched in earliest-deadline-first
//! order with strict non-preemption.
//!
//! A task's deadline is its simulated completion time. Deadlines may be
//! revised while a task is queued (it is reordered) or while it is running
//! (the field changes, the copy is never abandoned). In real-time mode the
//! unit runs on its own thread and busy-polls for work; in virtual-time mode
//! the engine drains it inline, which keeps replays deterministic.

use std::collections::{BinaryHeap, HashMap};
use std::sync::mpsc::{Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use thiserror::Error;

use crate::flash::{FlashArray, PageAddress};
use crate::sim::{RequestId, SimTime, TaskId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("task {0} is already enqueued")]
    DuplicateTask(TaskId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {0} is already done")]
    TaskDone(TaskId),
    #[error("a task is already running")]
    AlreadyRunning,
    #[error("no task is running")]
    NotRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    DataIn,
    DataOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Queued,
    Running,
    Done,
}

/// One bulk data-copy job with a revisable simulated-completion deadline.
#[derive(Debug, Clone)]
pub struct TransferTask {
    pub id: TaskId,
    pub direction: Direction,
    pub addr: PageAddress,
    pub request: RequestId,
    pub deadline: SimTime,
    pub enqueue_seq: u64,
    pub state: TaskState,
    /// Source bytes for DataIn copies.
    pub payload: Option<Arc<Vec<u8>>>,
}

/// Result of one executed copy, handed back to the engine.
#[derive(Debug, Clone)]
pub struct Completion {
    pub task: TaskId,
    pub request: RequestId,
    pub direction: Direction,
    pub deadline: SimTime,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeapEntry {
    deadline: SimTime,
    enqueue_seq: u64,
    id: TaskId,
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed for a min-heap on (deadline, enqueue_seq).
        other
            .deadline
            .cmp(&self.deadline)
            .then_with(|| other.enqueue_seq.cmp(&self.enqueue_seq))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// The EDF-ordered task set plus the single running slot.
///
/// Deadline updates use lazy deletion: the heap may hold stale entries, and
/// an entry is honored only if it still matches the task's current deadline
/// and the task is still queued.
#[derive(Debug, Default)]
pub struct FlashWorkQueue {
    heap: BinaryHeap<HeapEntry>,
    tasks: HashMap<TaskId, TransferTask>,
    running: Option<TaskId>,
    next_enqueue_seq: u64,
    dispatch_log: Vec<TaskId>,
}

impl FlashWorkQueue {
    pub fn new() -> Self {
        FlashWorkQueue::default()
    }

    /// Inserts a task in the Queued state.
    pub fn enqueue_transfer(&mut self, mut task: TransferTask) -> Result<(), ExecError> {
        if self.tasks.contains_key(&task.id) {
            return Err(ExecError::DuplicateTask(task.id));
        }
        task.enqueue_seq = self.next_enqueue_seq;
        self.next_enqueue_seq += 1;
        task.state = TaskState::Queued;
        self.heap.push(HeapEntry { deadline: task.deadline, enqueue_seq: task.enqueue_seq, id: task.id });
        self.tasks.insert(task.id, task);
        Ok(())
    }

    /// Revises a task's deadline. A queued task is reordered; a running task
    /// keeps executing and only its bookkeeping changes.
    pub fn update_deadline(&mut self, id: TaskId, new_deadline: SimTime) -> Result<(), ExecError> {
        let task = self.tasks.get_mut(&id).ok_or(ExecError::UnknownTask(id))?;
        match task.state {
            TaskState::Done => Err(ExecError::TaskDone(id)),
            TaskState::Running => {
                task.deadline = new_deadline;
                Ok(())
            }
            TaskState::Queued => {
                if task.deadline != new_deadline {
                    task.deadline = new_deadline;
                    self.heap.push(HeapEntry {
                        deadline: new_deadline,
                        enqueue_seq: task.enqueue_seq,
                        id,
                    });
                }
                Ok(())
            }
        }
    }

    /// Moves the minimal (deadline, enqueue_seq) queued task to Running.
    pub fn next_task(&mut self) -> Result<Option<&TransferTask>, ExecError> {
        if self.running.is_some() {
            return Err(ExecError::AlreadyRunning);
        }
        while let Some(entry) = self.heap.pop() {
            let valid = self
                .tasks
                .get(&entry.id)
                .map(|t| t.state == TaskState::Queued && t.deadline == entry.deadline)
                .unwrap_or(false);
            if valid {
                let task = self.tasks.get_mut(&entry.id).expect("validated above");
                task.state = TaskState::Running;
                self.running = Some(entry.id);
                self.dispatch_log.push(entry.id);
                return Ok(Some(&self.tasks[&entry.id]));
            }
        }
        Ok(None)
    }

    /// Performs the running task's copy and marks it Done.
    ///
    /// DataIn materializes the request payload (the bytes later committed on
    /// a successful program); DataOut copies the page out of the array.
    pub fn execute(&mut self, flash: &Mutex<FlashArray>) -> Result<Completion, ExecError> {
        let id = self.running.ok_or(ExecError::NotRunning)?;
        let task = self.tasks.get_mut(&id).expect("running task exists");
        let data = match task.direction {
            Direction::DataIn => {
                task.payload.as_ref().map(|p| p.as_ref().clone()).unwrap_or_default()
            }
            Direction::DataOut => {
                let flash = flash.lock().expect("flash lock");
                let (bytes, _) = flash
                    .read_page(task.addr)
                    .expect("transfer addresses are validated at submit");
                bytes
            }
        };
        task.state = TaskState::Done;
        let completion = Completion {
            task: id,
            request: task.request,
            direction: task.direction,
            deadline: task.deadline,
            data,
        };
        self.running = None;
        self.tasks.remove(&id);
        Ok(completion)
    }

    /// Drops every queued task. The running task, if any, is unaffected.
    pub fn clear_queued(&mut self) {
        self.heap.clear();
        self.tasks.retain(|_, t| t.state == TaskState::Running);
    }

    pub fn running(&self) -> Option<TaskId> {
        self.running
    }

    pub fn queued_len(&self) -> usize {
        self.tasks.values().filter(|t| t.state == TaskState::Queued).count()
    }

    pub fn task_state(&self, id: TaskId) -> Option<TaskState> {
        self.tasks.get(&id).map(|t| t.state)
    }

    pub fn task_deadline(&self, id: TaskId) -> Option<SimTime> {
        self.tasks.get(&id).map(|t| t.deadline)
    }

    /// Order in which tasks entered the Running state.
    pub fn dispatch_log(&self) -> &[TaskId] {
        &self.dispatch_log
    }
}

/// Wall-clock copy statistics for the real-time feasibility report.
#[derive(Debug, Clone, Default)]
pub struct CopyStats {
    pub copies: u64,
    pub budget_ns: u64,
    pub over_budget: u64,
    pub durations_ns: Vec<u64>,
}

impl CopyStats {
    fn record(&mut self, ns: u64) {
        self.copies += 1;
        if self.budget_ns > 0 && ns > self.budget_ns {
            self.over_budget += 1;
        }
        self.durations_ns.push(ns);
    }

    pub fn max_ns(&self) -> u64 {
        self.durations_ns.iter().copied().max().unwrap_or(0)
    }

    pub fn percentile_ns(&self, p: f64) -> u64 {
        if self.durations_ns.is_empty() {
            return 0;
        }
        let mut sorted = self.durations_ns.clone();
        sorted.sort_unstable();
        let rank = ((sorted.len() as f64 - 1.0) * p).round() as usize;
        sorted[rank.min(sorted.len() - 1)]
    }
}

pub enum ExecMsg {
    Enqueue(TransferTask),
    UpdateDeadline(TaskId, SimTime),
    /// Drop all queued tasks (power failure). The running copy finishes.
    Clear,
    Shutdown,
}

/// Handle to the execution unit thread used in real-time mode.
pub struct ThreadedExecutor {
    tx: Sender<ExecMsg>,
    pub replies: Receiver<Completion>,
    join: Option<JoinHandle<CopyStats>>,
}

impl ThreadedExecutor {
    /// Spawns the unit on its own thread. `budget_ns` is the copy-time budget
    /// used by the feasibility report (10% of the simulated transfer time);
    /// `pin` optionally binds the thread to a core.
    pub fn spawn(flash: Arc<Mutex<FlashArray>>, budget_ns: u64, pin: Option<usize>) -> Self {
        let (tx, rx) = std::sync::mpsc::channel::<ExecMsg>();
        let (reply_tx, replies) = std::sync::mpsc::channel::<Completion>();
        let join = std::thread::Builder::new()
            .name("flash-exec".into())
            .spawn(move || {
                if let Some(core) = pin {
                    crate::affinity::pin_current_thread(core);
                }
                run_unit(rx, reply_tx, flash, budget_ns)
            })
            .expect("spawn executor thread");
        ThreadedExecutor { tx, replies, join: Some(join) }
    }

    pub fn send(&self, msg: ExecMsg) {
        // A dead executor thread is a simulator-internal fatal error.
        self.tx.send(msg).expect("executor thread alive");
    }

    /// Signals shutdown and returns the copy statistics.
    pub fn finish(mut self) -> CopyStats {
        let _ = self.tx.send(ExecMsg::Shutdown);
        self.join.take().expect("not yet joined").join().expect("executor thread panicked")
    }
}

fn run_unit(
    rx: Receiver<ExecMsg>,
    reply_tx: Sender<Completion>,
    flash: Arc<Mutex<FlashArray>>,
    budget_ns: u64,
) -> CopyStats {
    let mut queue = FlashWorkQueue::new();
    let mut stats = CopyStats { budget_ns, ..CopyStats::default() };
    let mut shutdown = false;
    let mut idle_spins = 0u32;
    loop {
        loop {
            match rx.try_recv() {
                Ok(ExecMsg::Enqueue(task)) => {
                    queue.enqueue_transfer(task).expect("engine assigns unique task ids");
                }
                Ok(ExecMsg::UpdateDeadline(id, deadline)) => {
                    // The task may already be done; stale updates are harmless.
                    match queue.update_deadline(id, deadline) {
                        Ok(()) | Err(ExecError::UnknownTask(_)) | Err(ExecError::TaskDone(_)) => {}
                        Err(e) => panic!("deadline update failed: {e}"),
                    }
                }
                Ok(ExecMsg::Clear) => queue.clear_queued(),
                Ok(ExecMsg::Shutdown) => shutdown = true,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    shutdown = true;
                    break;
                }
            }
        }
        if queue.next_task().expect("nothing running here").is_some() {
            idle_spins = 0;
            let start = Instant::now();
            let completion = queue.execute(&flash).expect("task is running");
            stats.record(start.elapsed().as_nanos() as u64);
            if reply_tx.send(completion).is_err() {
                // Engine is gone; drain and exit.
                shutdown = true;
            }
            continue;
        }
        if shutdown {
            return stats;
        }
        // Busy-poll for the next task; back off a little so a small host
        // does not starve the event loop.
        idle_spins = idle_spins.wrapping_add(1);
        if idle_spins % 512 == 0 {
            std::thread::yield_now();
        } else {
            std::hint::spin_loop();
        }
    }
}
