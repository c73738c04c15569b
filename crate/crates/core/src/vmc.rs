//! Per-node VMC update rules.
//!
//! A node owns one vessel per child slot. Each iteration it takes the
//! resource handed down by its parents (or generates it when it has none),
//! collects successin from its slots, adapts vessels toward the incoming
//! successin, hands resource down in proportion to vessel thickness, and
//! reports its successin to the parents in proportion to the resource each
//! of them delivered.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::genome::Genome;

/// Scalar sensor summary of one leaf node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SensorFrame {
    /// Normalized irradiance aggregated over the four photoresistors.
    pub light: f64,
    /// 1 when the leaf points straight up, 0 when horizontal or inverted.
    pub uprightness: f64,
}

impl SensorFrame {
    /// Builds a frame, clamping both readings into `[0, 1]`.
    pub fn new(light: f64, uprightness: f64) -> Self {
        SensorFrame { light: clamp_unit(light), uprightness: clamp_unit(uprightness) }
    }
}

/// Clamps into `[0, 1]`, mapping NaN to 0.
pub fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VmcError {
    /// `transfer_successin` needs at least one incoming value.
    NoChildren,
    /// The step input does not match the node's slot bookkeeping.
    SlotMismatch { expected: usize, found: usize },
    /// A scalar input outside its domain.
    Domain { what: &'static str, value: f64 },
}

impl fmt::Display for VmcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VmcError::NoChildren => write!(f, "successin transfer needs at least one child value"),
            VmcError::SlotMismatch { expected, found } => {
                write!(f, "node has {expected} child slots but step input carries {found}")
            }
            VmcError::Domain { what, value } => write!(f, "{what} out of domain: {value}"),
        }
    }
}

impl core::error::Error for VmcError {}

/// Successin compiled at a free leaf from its own sensors.
pub fn produce_successin(sensors: SensorFrame, genome: &Genome) -> f64 {
    clamp_unit(
        genome.omega_c + genome.omega_phi * sensors.uprightness + genome.omega_lambda * sensors.light,
    )
}

/// Local modulation factor applied to successin relayed through a node.
pub fn transfer_factor(sensors: SensorFrame, genome: &Genome) -> f64 {
    genome.rho_c + genome.rho_phi * sensors.uprightness + genome.rho_lambda * sensors.light
}

/// Sums incoming successin and scales it by the local transfer factor.
pub fn transfer_successin(
    children_successin: &[f64],
    sensors: SensorFrame,
    genome: &Genome,
) -> Result<f64, VmcError> {
    if children_successin.is_empty() {
        return Err(VmcError::NoChildren);
    }
    let total: f64 = children_successin.iter().sum();
    Ok(clamp_unit(transfer_factor(sensors, genome) * total))
}

/// One vessel adaptation step: `alpha * V + (1 - alpha) * S^beta`.
///
/// For constant `S` this contracts geometrically (ratio `alpha`) onto `S^beta`.
pub fn update_vessel(current_vessel: f64, child_successin: f64, genome: &Genome) -> f64 {
    let drive = libm::pow(child_successin.max(0.0), genome.beta);
    genome.alpha * current_vessel.max(0.0) + (1.0 - genome.alpha) * drive
}

/// Splits `total` in proportion to `weights`, equally when all weights are zero.
fn proportional_split(total: f64, weights: &[f64]) -> Vec<f64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    if sum > 0.0 {
        weights.iter().map(|w| total * (w / sum)).collect()
    } else {
        vec![total / weights.len() as f64; weights.len()]
    }
}

/// Resource handed to each child slot, proportional to its vessel.
pub fn distribute_resource(incoming_resource: f64, vessels: &[f64]) -> Vec<f64> {
    proportional_split(incoming_resource, vessels)
}

/// Successin reported to each parent, proportional to the resource it sent.
pub fn split_successin_to_parents(total_successin: f64, resource_per_parent: &[f64]) -> Vec<f64> {
    proportional_split(total_successin, resource_per_parent)
}

/// Live VMC variables of one node.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeVmcState {
    /// Resource received (or generated) in the last iteration.
    pub resource: f64,
    /// Successin reported upstream in the last iteration.
    pub successin_out: f64,
    pub vessels: Vec<f64>,
    /// Successin last seen on each child slot.
    pub child_successin: Vec<f64>,
}

impl NodeVmcState {
    pub const INITIAL_VESSEL: f64 = 0.01;

    pub fn cold_start(child_slots: usize) -> Self {
        NodeVmcState {
            resource: 0.0,
            successin_out: 0.0,
            vessels: vec![Self::INITIAL_VESSEL; child_slots],
            child_successin: vec![0.0; child_slots],
        }
    }

    pub fn child_slots(&self) -> usize {
        self.vessels.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.vessels.len() == self.child_successin.len()
            && self.resource >= 0.0
            && (0.0..=1.0).contains(&self.successin_out)
            && self.vessels.iter().all(|v| *v >= 0.0 && v.is_finite())
    }
}

/// Settings shared by all nodes of a run besides the genome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeParams {
    pub genome: Genome,
    /// Largest successin a single free leaf may emit (`1 / max_leaves`).
    pub leaf_cap: f64,
    /// Resource generated per iteration by a node without live parents.
    pub root_resource: f64,
}

impl NodeParams {
    pub const DEFAULT_MAX_LEAVES: u32 = 6;

    pub fn new(genome: Genome, max_leaves: u32) -> Self {
        NodeParams { genome, leaf_cap: 1.0 / max_leaves.max(1) as f64, root_resource: 1.0 }
    }
}

impl Default for NodeParams {
    fn default() -> Self {
        NodeParams::new(Genome::BRAID, Self::DEFAULT_MAX_LEAVES)
    }
}

/// What arrives on one child slot during an iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotInput {
    /// Unconnected leaf: produce successin from the leaf's own sensors.
    Free(SensorFrame),
    /// A child module is attached and live; relay its successin.
    Relay { successin: f64, sensors: SensorFrame },
}

impl SlotInput {
    pub fn sensors(&self) -> SensorFrame {
        match *self {
            SlotInput::Free(s) => s,
            SlotInput::Relay { sensors, .. } => sensors,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// Resource decoded from each live parent. Empty means "generate".
    pub parent_resource: &'a [f64],
    pub slots: &'a [SlotInput],
}

/// The five phases of one iteration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ReceiveResource,
    GatherSuccessin,
    AdaptVessels,
    DistributeResource,
    SplitSuccessin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: NodeVmcState,
    /// Sum of resource received from parents (0 when generating).
    pub resource_in: f64,
    /// Resource generated locally (0 when fed by parents).
    pub resource_generated: f64,
    /// Successin entering each slot after production or relay.
    pub slot_successin: Vec<f64>,
    /// Resource handed to each slot.
    pub slot_resource: Vec<f64>,
    /// Successin owed to each parent, aligned with `parent_resource`.
    pub parent_successin: Vec<f64>,
    /// Phases in the order they ran.
    pub chronology: Vec<Phase>,
}

/// Runs one iteration of the node update.
pub fn node_step(
    state: &NodeVmcState,
    input: &StepInput<'_>,
    params: &NodeParams,
) -> Result<StepOutput, VmcError> {
    let n = state.child_slots();
    if input.slots.len() != n || state.child_successin.len() != n {
        return Err(VmcError::SlotMismatch { expected: n, found: input.slots.len() });
    }
    for &r in input.parent_resource {
        if !r.is_finite() || r < 0.0 {
            return Err(VmcError::Domain { what: "parent resource", value: r });
        }
    }
    let genome = &params.genome;
    let mut chronology = Vec::with_capacity(5);

    chronology.push(Phase::ReceiveResource);
    let (resource_in, resource_generated) = if input.parent_resource.is_empty() {
        (0.0, params.root_resource)
    } else {
        (input.parent_resource.iter().sum(), 0.0)
    };
    let resource = resource_in + resource_generated;

    chronology.push(Phase::GatherSuccessin);
    let mut slot_successin = Vec::with_capacity(n);
    for slot in input.slots {
        let s = match *slot {
            SlotInput::Free(sensors) => produce_successin(sensors, genome) * params.leaf_cap,
            SlotInput::Relay { successin, sensors } => {
                transfer_successin(&[clamp_unit(successin)], sensors, genome)?
            }
        };
        slot_successin.push(s);
    }

    chronology.push(Phase::AdaptVessels);
    let vessels: Vec<f64> = state
        .vessels
        .iter()
        .zip(&slot_successin)
        .map(|(&v, &s)| update_vessel(v, s, genome))
        .collect();

    chronology.push(Phase::DistributeResource);
    let slot_resource = distribute_resource(resource, &vessels);

    chronology.push(Phase::SplitSuccessin);
    let successin_out = clamp_unit(slot_successin.iter().sum());
    let parent_successin = split_successin_to_parents(successin_out, input.parent_resource);

    Ok(StepOutput {
        state: NodeVmcState {
            resource,
            successin_out,
            vessels,
            child_successin: slot_successin.clone(),
        },
        resource_in,
        resource_generated,
        slot_successin,
        slot_resource,
        parent_successin,
        chronology,
    })
}
