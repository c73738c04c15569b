//! One module as a logical process: the iteration loop body and its persistence.

use chrono::{DateTime, Utc};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vmc_core::channel::ChannelError;
use vmc_core::topology::{ModuleId, CHILD_SLOTS, PARENT_PLUGS};
use vmc_core::vmc::{node_step, NodeParams, SlotInput, StepInput, StepOutput};
use vmc_core::{NodeVmcState, VmcError};

use crate::fabric::{stream_rng, Fabric, Pin};
use crate::snapshot::{Loaded, SnapshotError, SnapshotStore, StateSnapshot};
use crate::telemetry::{format_ts, SlotTelemetry, TelemetryRecord};

#[derive(Debug, thiserror::Error)]
pub enum ProcessError {
    #[error("{module}: {source}")]
    Vmc { module: ModuleId, source: VmcError },
    #[error("{module}: channel: {source}")]
    Channel { module: ModuleId, source: ChannelError },
    #[error("{module}: snapshot write failed: {source}")]
    Snapshot { module: ModuleId, source: SnapshotError },
}

/// Everything one iteration produced.
#[derive(Debug, Clone)]
pub struct Iteration {
    pub record: TelemetryRecord,
    pub step: StepOutput,
    /// Parent plugs that delivered resource, in the order of `step.parent_successin`.
    pub live_plugs: Vec<u8>,
}

/// How a booted process obtained its state.
#[derive(Debug, Clone, PartialEq)]
pub enum Boot {
    Cold,
    Resumed { iteration: u64 },
    /// The snapshot was unusable; started cold.
    Recovered { reason: String },
}

const SNAPSHOT_ATTEMPTS: u32 = 3;

pub struct ModuleProcess {
    id: ModuleId,
    state: NodeVmcState,
    iteration: u64,
    wait_rng: ChaCha8Rng,
    sensor_rng: ChaCha8Rng,
    store: Option<SnapshotStore>,
    jitter: bool,
}

impl ModuleProcess {
    /// Boots a process, resuming from `store` when it holds a snapshot.
    /// `incarnation` counts restarts and selects fresh random streams.
    pub fn boot(id: ModuleId, seed: u64, incarnation: u32, store: Option<SnapshotStore>) -> (Self, Boot) {
        let loaded = match &store {
            Some(s) => s.load(id.as_str()),
            None => Loaded::Missing,
        };
        let boot = match &loaded {
            Loaded::Found(s) => Boot::Resumed { iteration: s.iteration },
            Loaded::Missing => Boot::Cold,
            Loaded::Corrupt(reason) => Boot::Recovered { reason: reason.clone() },
        };
        let (state, iteration) = loaded.into_state();
        let p = ModuleProcess {
            wait_rng: stream_rng(seed, &format!("wait:{id}:{incarnation}")),
            sensor_rng: stream_rng(seed, &format!("sense:{id}:{incarnation}")),
            id,
            state,
            iteration,
            store,
            jitter: true,
        };
        (p, boot)
    }

    /// Disables sensor noise (sensors become a pure function of the scene).
    pub fn without_jitter(mut self) -> Self {
        self.jitter = false;
        self
    }

    pub fn id(&self) -> &ModuleId {
        &self.id
    }

    pub fn state(&self) -> &NodeVmcState {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Next wait in microseconds, uniform in `[min_s, max_s]`.
    pub fn next_wait_us(&mut self, min_s: f64, max_s: f64) -> u64 {
        let s = if max_s > min_s { self.wait_rng.gen_range(min_s..=max_s) } else { min_s };
        (s * 1e6).round() as u64
    }

    /// Initial offset so that modules do not start in lockstep.
    pub fn first_wake_us(&mut self, max_s: f64) -> u64 {
        (self.wait_rng.gen_range(0.0..max_s.max(1e-6)) * 1e6).round() as u64
    }

    /// Runs one pass of the chronology at `now_us`.
    pub fn iterate(
        &mut self,
        fabric: &mut Fabric,
        params: &NodeParams,
        now_us: u64,
        ts: DateTime<Utc>,
    ) -> Result<Iteration, ProcessError> {
        let id = self.id.clone();
        let chan = |source| ProcessError::Channel { module: id.clone(), source };

        // Decode: parents by liveness, children per slot.
        let mut parent_r = Vec::new();
        let mut live_plugs = Vec::new();
        for plug in 1..=PARENT_PLUGS {
            match fabric.read(&Pin::PlugIn(id.clone(), plug), now_us) {
                Ok(r) if r.live => {
                    parent_r.push(r.value.unwrap_or(0.0));
                    live_plugs.push(plug);
                }
                Ok(_) | Err(ChannelError::NotReady) => {}
                Err(e) => return Err(chan(e)),
            }
        }
        let mut slots = Vec::with_capacity(CHILD_SLOTS as usize);
        for k in 1..=CHILD_SLOTS {
            let sensors = if self.jitter {
                fabric.sense(&id.slot(k), Some(&mut self.sensor_rng))
            } else {
                fabric.sense(&id.slot(k), None)
            };
            let input = match fabric.read(&Pin::SlotIn(id.clone(), k), now_us) {
                Ok(r) if r.live => SlotInput::Relay { successin: r.value.unwrap_or(0.0), sensors },
                Ok(_) | Err(ChannelError::NotReady) => SlotInput::Free(sensors),
                Err(e) => return Err(chan(e)),
            };
            slots.push(input);
        }

        let step = node_step(&self.state, &StepInput { parent_resource: &parent_r, slots: &slots }, params)
            .map_err(|source| ProcessError::Vmc { module: id.clone(), source })?;

        // Encode: resource down every slot, successin up every plug.
        for k in 1..=CHILD_SLOTS {
            fabric.transmit(&Pin::SlotOut(id.clone(), k), step.slot_resource[k as usize - 1], now_us).map_err(chan)?;
        }
        for plug in 1..=PARENT_PLUGS {
            let s = live_plugs.iter().position(|p| *p == plug).map(|i| step.parent_successin[i]).unwrap_or(0.0);
            fabric.transmit(&Pin::PlugOut(id.clone(), plug), s, now_us).map_err(chan)?;
        }

        self.iteration += 1;
        self.state = step.state.clone();
        let record = TelemetryRecord {
            ts,
            module: id.to_string(),
            iter: self.iteration,
            r_in: step.resource_in,
            r_gen: step.resource_generated,
            s_out: step.state.successin_out,
            slots: slots
                .iter()
                .enumerate()
                .map(|(i, input)| {
                    let sensors = input.sensors();
                    SlotTelemetry {
                        s: step.slot_successin[i],
                        v: step.state.vessels[i],
                        r: step.slot_resource[i],
                        live: matches!(input, SlotInput::Relay { .. }),
                        light: sensors.light,
                        upright: sensors.uprightness,
                    }
                })
                .collect(),
            parent_ids: fabric.parent_ids(&id),
            child_ids: fabric.child_ids(&id),
        };

        if let Some(store) = &self.store {
            let snap = StateSnapshot {
                module: id.to_string(),
                state: self.state.clone(),
                slot_occupancy: record.slots.iter().map(|s| s.live).collect(),
                iteration: self.iteration,
                written_at: format_ts(&ts),
            };
            store
                .write_with_retry(&snap, SNAPSHOT_ATTEMPTS)
                .map_err(|source| ProcessError::Snapshot { module: id.clone(), source })?;
        }
        Ok(Iteration { record, step, live_plugs })
    }

    /// Stops driving every output, as when the process dies.
    pub fn release_outputs(id: &ModuleId, fabric: &mut Fabric, now_us: u64) {
        for k in 1..=CHILD_SLOTS {
            let _ = fabric.silence(&Pin::SlotOut(id.clone(), k), now_us);
        }
        for p in 1..=PARENT_PLUGS {
            let _ = fabric.silence(&Pin::PlugOut(id.clone(), p), now_us);
        }
    }
}
