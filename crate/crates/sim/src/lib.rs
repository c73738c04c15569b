//! Runtime of the vascular morphogenesis controller simulator.
//!
//! Modules run as independent processes that talk only over simulated
//! analog cables. Runs are either fast-forward (seeded discrete events) or
//! real time (one thread per module), and produce per-iteration telemetry,
//! state snapshots and growth advice.

pub mod advisor;
pub mod command;
pub mod des;
pub mod fabric;
pub mod live;
pub mod net;
pub mod process;
pub mod report;
pub mod scenario;
pub mod snapshot;
pub mod telemetry;

pub use command::{Ack, Command, Rejection};
pub use des::{run_fast_forward, RunOptions, RunOutput, Simulation};
pub use scenario::Scenario;
pub use telemetry::TelemetryRecord;
