//! Allocation-only core of a distributed vascular morphogenesis controller (VMC)
//! simulator.
//!
//! Everything in this crate is free of IO and clocks so it can run on a
//! microcontroller just as well as inside the std simulator:
//!
//! * [`vmc`] - the per-node update rules (successin, vessels, resource).
//! * [`channel`] - the duty-cycle encoded analog wire between two modules.
//! * [`topology`] - the rooted graph of Y-modules and its connectivity registry.
//! * [`environment`] - scene description and leaf sensor synthesis.
//! * [`advice`] - ranking of free leaves for the next growth step.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod advice;
pub mod channel;
pub mod environment;
pub mod genome;
pub mod topology;
pub mod vmc;

pub use genome::{Genome, GenomeError};
pub use vmc::{NodeVmcState, SensorFrame, VmcError};
