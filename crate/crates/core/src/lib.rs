//! Closed-loop simulation of a 5G cell's relative-priority scheduler and a
//! UAV-side probabilistic state machine that picks QoS data flows.
//!
//! The crate is split along the loop:
//!
//! * [`sched`]: resource-fair weighted scheduler over per-flow FIFO buffers.
//! * [`net`]: traffic sources, uplink/downlink links and round-trip measurement.
//! * [`sensing`]: sliding-window latency estimates, sigmoid conditions and the
//!   spaciousness/risk filter.
//! * [`pfsm`]: the QoS-selecting state machine, its signals and actions.
//! * [`plant`]: a delayed double-integrator UAV proxy with PD control.
//! * [`scenario`]: declarative scenario description, the tick loop and the
//!   per-phase run summary.
//!
//! Everything here is deterministic given a scenario and a seed, and does no
//! I/O. File formats and the command line live in the `dynqos` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![warn(missing_docs)]

extern crate alloc;

pub mod net;
pub mod pfsm;
pub mod plant;
pub mod scenario;
pub mod sched;
pub mod sensing;

mod rng;

pub use net::{CellModel, Delivery, RttSample, SourceId, StepOutput, TrafficSource};
pub use pfsm::{ActionCommand, PfsmState, SignalSet, Supervisor, TransitionTable};
pub use plant::{ControllerConfig, PlantState, Vec3};
pub use scenario::{run, RunSummary, ScenarioConfig, TraceRecord};
pub use sched::{Direction, FlowId, LinkConfig, Packet, PacketKind, QosFlow};
