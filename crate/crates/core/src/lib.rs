//! A phase-accurate NAND flash simulator for exercising FTL-style software.
//!
//! The simulator services read/program/erase requests against a multi-bus,
//! multi-chip array model with an out-of-order controller, injects internal
//! faults and power failures through a per-page abstract state machine, and
//! can release completions either in pure virtual time (the deterministic
//! oracle) or aligned to the wall clock with nanosecond-scale spin waits.

pub mod affinity;
pub mod align;
pub mod config;
pub mod controller;
pub mod executor;
pub mod fault;
pub mod flash;
pub mod harness;
pub mod sim;
pub mod timing;
pub mod trace;

pub use config::SimConfig;
pub use flash::{AbstractPageState, FlashArray, Geometry, PageAddress};
pub use sim::{Ack, Mode, RequestId, SimTime, Simulator, TaskId};
pub use timing::OpKind;
