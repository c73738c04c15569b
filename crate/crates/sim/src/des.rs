//! Single-threaded discrete-event runtime with seeded waits.
//!
//! Every module is an independent process scheduled at its own randomized
//! times; the only interaction between processes is through the fabric's
//! cables. Given a scenario and seed the event order, and therefore every
//! output byte, is fixed.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use log::warn;
use vmc_core::topology::{ModuleId, SlotRef};
use vmc_core::vmc::NodeParams;

use crate::command::{Command, Rejection};
use crate::fabric::Fabric;
use crate::process::{Boot, Iteration, ModuleProcess};
use crate::report::{evaluate, Report};
use crate::scenario::Scenario;
use crate::snapshot::SnapshotStore;
use crate::telemetry::{sim_epoch, CsvLog, TelemetryError, TelemetryRecord};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Wake {
    Script(usize),
    Module(ModuleId, u32),
}

/// What one scheduler step did.
#[derive(Debug)]
pub enum Outcome {
    Iterated(Box<Iteration>),
    Applied { at_us: u64, command: Command, result: Result<(), Rejection> },
    /// A module process failed and was stopped.
    Halted { module: ModuleId, error: String },
    /// A stale or paused wake-up.
    Idle,
}

pub struct Simulation {
    scenario: Scenario,
    params: NodeParams,
    fabric: Fabric,
    running: BTreeMap<ModuleId, (ModuleProcess, u32)>,
    incarnations: BTreeMap<ModuleId, u32>,
    queue: BinaryHeap<Reverse<(u64, u64, Wake)>>,
    seq: u64,
    now_us: u64,
    paused: bool,
    store: Option<SnapshotStore>,
    epoch: DateTime<Utc>,
    jitter: bool,
    warnings: Vec<String>,
    topology_changed: bool,
}

impl Simulation {
    /// Sets up the fabric, powers the initial modules and queues the script.
    pub fn new(scenario: Scenario, store: Option<SnapshotStore>) -> Result<Self, Rejection> {
        let graph = scenario.initial_graph().map_err(|e| Rejection::new("invalid_scenario", e.to_string()))?;
        let fabric =
            Fabric::with_graph(scenario.runtime.seed, scenario.channel.receiver(), scenario.scene.clone(), &graph)?;
        let mut sim = Simulation {
            params: scenario.node_params(),
            fabric,
            running: BTreeMap::new(),
            incarnations: BTreeMap::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now_us: 0,
            paused: false,
            store,
            epoch: sim_epoch(),
            jitter: true,
            warnings: Vec::new(),
            topology_changed: true,
            scenario,
        };
        for i in 0..sim.scenario.events.len() {
            let at = (sim.scenario.events[i].at * 1e6).round() as u64;
            sim.schedule(at, Wake::Script(i));
        }
        let powered: Vec<ModuleId> =
            sim.scenario.modules.iter().filter(|m| m.powered).map(|m| m.id.clone()).collect();
        for id in powered {
            sim.boot(id);
        }
        Ok(sim)
    }

    /// Turns sensor noise off for every process booted from now on.
    pub fn without_jitter(mut self) -> Self {
        self.jitter = false;
        let ids: Vec<ModuleId> = self.running.keys().cloned().collect();
        for id in ids {
            if let Some((p, inc)) = self.running.remove(&id) {
                self.running.insert(id, (p.without_jitter(), inc));
            }
        }
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn epoch(&self) -> DateTime<Utc> {
        self.epoch
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn is_running(&self, id: &ModuleId) -> bool {
        self.running.contains_key(id)
    }

    /// Whether the topology changed since the last call.
    pub fn take_topology_change(&mut self) -> bool {
        std::mem::take(&mut self.topology_changed)
    }

    fn schedule(&mut self, at_us: u64, wake: Wake) {
        self.seq += 1;
        self.queue.push(Reverse((at_us, self.seq, wake)));
    }

    fn boot(&mut self, id: ModuleId) {
        let inc = self.incarnations.entry(id.clone()).and_modify(|i| *i += 1).or_insert(0);
        let inc = *inc;
        let (mut p, boot) = ModuleProcess::boot(id.clone(), self.scenario.runtime.seed, inc, self.store.clone());
        if !self.jitter {
            p = p.without_jitter();
        }
        if let Boot::Recovered { reason } = boot {
            let msg = format!("{id}: unusable snapshot, cold start ({reason})");
            warn!("{msg}");
            self.warnings.push(msg);
        }
        let first = self.now_us + p.first_wake_us(self.scenario.runtime.max_wait);
        self.running.insert(id.clone(), (p, inc));
        self.schedule(first, Wake::Module(id, inc));
    }

    fn halt(&mut self, id: &ModuleId) {
        self.running.remove(id);
        ModuleProcess::release_outputs(id, &mut self.fabric, self.now_us);
    }

    fn parse_slot(text: &str) -> Result<SlotRef, Rejection> {
        SlotRef::parse_registry(text).map_err(|e| Rejection::new(e.code(), e.to_string()))
    }

    fn parse_module(&self, text: &str) -> Result<ModuleId, Rejection> {
        let id = ModuleId::new(text.to_string()).map_err(|e| Rejection::new(e.code(), e.to_string()))?;
        if !self.fabric.graph().contains(&id) {
            return Err(Rejection::new("unknown_module", format!("no module {id}")));
        }
        Ok(id)
    }

    /// Applies a command at the current simulated time.
    pub fn apply(&mut self, command: &Command) -> Result<(), Rejection> {
        let now = self.now_us;
        match command {
            Command::Attach { parent, child } => {
                let slot = Self::parse_slot(parent)?;
                let child = self.parse_module(child)?;
                self.fabric.attach(&slot, &child, now)?;
                self.topology_changed = true;
                if !self.running.contains_key(&child) {
                    self.boot(child);
                }
            }
            Command::Detach { parent } => {
                let slot = Self::parse_slot(parent)?;
                self.fabric.detach(&slot, now)?;
                self.topology_changed = true;
            }
            Command::SceneEvent { event } => self.fabric.apply_scene(event)?,
            Command::Kill { module } => {
                let id = self.parse_module(module)?;
                if !self.running.contains_key(&id) {
                    return Err(Rejection::new("not_running", format!("{id} is not running")));
                }
                self.halt(&id);
            }
            Command::Restart { module } => {
                let id = self.parse_module(module)?;
                if self.running.contains_key(&id) {
                    return Err(Rejection::new("running", format!("{id} is already running")));
                }
                self.boot(id);
            }
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
        }
        Ok(())
    }

    /// Time of the next queued event.
    pub fn peek_us(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((t, _, _))| *t)
    }

    /// Executes the next event if it is due no later than `until_us`.
    pub fn step(&mut self, until_us: u64) -> Option<Outcome> {
        if self.peek_us()? > until_us {
            return None;
        }
        let Reverse((at, _, wake)) = self.queue.pop()?;
        self.now_us = at;
        Some(match wake {
            Wake::Script(i) => {
                let command = self.scenario.events[i].command.clone();
                let result = self.apply(&command);
                if let Err(e) = &result {
                    let msg = format!("script event {i} ({}) rejected: {e}", command.name());
                    warn!("{msg}");
                    self.warnings.push(msg);
                }
                Outcome::Applied { at_us: at, command, result }
            }
            Wake::Module(id, inc) => self.wake(id, inc),
        })
    }

    fn wake(&mut self, id: ModuleId, inc: u32) -> Outcome {
        let (min_w, max_w) = (self.scenario.runtime.min_wait, self.scenario.runtime.max_wait);
        let now = self.now_us;
        let ts = self.epoch + Duration::microseconds(now as i64);
        let Some((p, current)) = self.running.get_mut(&id) else { return Outcome::Idle };
        if *current != inc {
            return Outcome::Idle;
        }
        let next = now + p.next_wait_us(min_w, max_w);
        if self.paused {
            self.schedule(next, Wake::Module(id, inc));
            return Outcome::Idle;
        }
        match p.iterate(&mut self.fabric, &self.params, now, ts) {
            Ok(it) => {
                self.schedule(next, Wake::Module(id, inc));
                Outcome::Iterated(Box::new(it))
            }
            Err(e) => {
                let msg = format!("{id} halted: {e}");
                warn!("{msg}");
                self.warnings.push(msg.clone());
                self.halt(&id);
                Outcome::Halted { module: id, error: msg }
            }
        }
    }

    /// Runs until `until_us`, handing every iteration to `sink`.
    pub fn run_until<F: FnMut(&mut Self, &Iteration)>(&mut self, until_us: u64, mut sink: F) {
        while let Some(outcome) = self.step(until_us) {
            if let Outcome::Iterated(it) = outcome {
                sink(self, &it);
            }
        }
        self.now_us = self.now_us.max(until_us);
    }
}

/// Where a fast-forward run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Snapshot directory; defaults to `<out_dir>/snapshots` when `out_dir` is set.
    pub snapshot_dir: Option<PathBuf>,
    /// Overrides the scenario duration, seconds.
    pub duration: Option<f64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<TelemetryRecord>,
    pub report: Report,
    pub epoch: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Setup(#[from] Rejection),
    #[error("telemetry: {0}")]
    Telemetry(#[from] TelemetryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshots: {0}")]
    Snapshot(#[from] crate::snapshot::SnapshotError),
}

/// Writes `text` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)
}

/// Plays a scenario in fast-forward mode and evaluates its checks.
///
/// With an output directory the run leaves `telemetry.csv` (all modules),
/// `modules/<id>.csv`, `registry.txt`, `snapshots/`, `report.txt` and
/// `report.json` behind.
pub fn run_fast_forward(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let snapshot_dir = opts.snapshot_dir.clone().or_else(|| opts.out_dir.as_ref().map(|d| d.join("snapshots")));
    let store = match snapshot_dir {
        Some(d) => Some(SnapshotStore::open(d)?),
        None => None,
    };
    let mut sim = Simulation::new(scenario.clone(), store)?;
    let duration = opts.duration.unwrap_or(scenario.runtime.duration);
    let end_us = (duration * 1e6).round() as u64;

    let mut unified = None;
    let mut per_module: BTreeMap<String, CsvLog> = BTreeMap::new();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir.join("modules"))?;
        let csv = dir.join("telemetry.csv");
        if csv.exists() {
            fs::remove_file(&csv)?;
        }
        unified = Some(CsvLog::open(&csv)?);
    }
    let mut records = Vec::new();
    let mut failure: Option<TelemetryError> = None;
    sim.run_until(end_us, |sim, it| {
        if let Some(dir) = &opts.out_dir {
            if sim.take_topology_change() {
                if let Err(e) = write_atomic(&dir.join("registry.txt"), &sim.fabric().graph().registry_export()) {
                    failure.get_or_insert(e.into());
                }
            }
            let res = unified.as_mut().map(|u| u.append(&it.record)).unwrap_or(Ok(())).and_then(|_| {
                let log = match per_module.get_mut(&it.record.module) {
                    Some(l) => l,
                    None => {
                        let path = dir.join("modules").join(format!("{}.csv", it.record.module));
                        if path.exists() {
                            fs::remove_file(&path)?;
                        }
                        per_module.entry(it.record.module.clone()).or_insert(CsvLog::open(&path)?)
                    }
                };
                log.append(&it.record)
            });
            if let Err(e) = res {
                failure.get_or_insert(e);
            }
        }
        records.push(it.record.clone());
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    let epoch = sim.epoch();
    let mut scenario_run = scenario.clone();
    scenario_run.runtime.duration = duration;
    let report = evaluate(&scenario_run, &records, &epoch, sim.warnings().to_vec());
    if let Some(dir) = &opts.out_dir {
        if let Some(mut u) = unified {
            u.flush()?;
        }
        for log in per_module.values_mut() {
            log.flush()?;
        }
        write_atomic(&dir.join("registry.txt"), &sim.fabric().graph().registry_export())?;
        fs::write(dir.join("report.txt"), report.to_text())?;
        fs::write(dir.join("report.json"), report.to_json())?;
    }
    Ok(RunOutput { records, report, epoch })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"
        name = "two"
        [runtime]
        duration = 60.0
        [channel]
        ideal = true
        [[modules]]
        id = "RPN1"
        [[modules]]
        id = "RPN2"
        level = 1
        powered = false
        [[events]]
        at = 10.0
        op = "attach"
        parent = "RPN1.1"
        child = "RPN2"
        [[events]]
        at = 40.0
        op = "detach"
        parent = "RPN1.1"
    "#;

    #[test]
    fn unpowered_module_boots_on_attach() {
        let s = Scenario::parse(TWO).unwrap();
        let mut sim = Simulation::new(s, None).unwrap();
        assert!(!sim.is_running(&ModuleId::new("RPN2").unwrap()));
        let mut rpn2_rows = 0;
        sim.run_until(30_000_000, |_, it| {
            if it.record.module == "RPN2" {
                rpn2_rows += 1;
            }
        });
        assert!(sim.is_running(&ModuleId::new("RPN2").unwrap()));
        assert!(rpn2_rows > 10);
    }

    #[test]
    fn detached_module_generates_its_own_resource() {
        let s = Scenario::parse(TWO).unwrap();
        let mut sim = Simulation::new(s, None).unwrap();
        let mut last_rpn2 = None;
        sim.run_until(60_000_000, |_, it| {
            if it.record.module == "RPN2" {
                last_rpn2 = Some(it.record.clone());
            }
        });
        let r = last_rpn2.unwrap();
        assert_eq!(r.r_gen, 1.0);
        assert!(r.parent_ids.is_empty());
    }

    #[test]
    fn iterations_respect_wait_bounds() {
        let s = Scenario::parse(TWO).unwrap();
        let mut sim = Simulation::new(s, None).unwrap();
        let mut times: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        sim.run_until(60_000_000, |sim, it| times.entry(it.record.module.clone()).or_default().push(sim.now_us()));
        for ts in times.values() {
            for w in ts.windows(2) {
                let d = w[1] - w[0];
                assert!((800_000..=1_200_000).contains(&d), "wait {d}");
            }
        }
    }

    #[test]
    fn pause_stops_iterations() {
        let text = format!("{TWO}\n[[events]]\nat = 45.0\nop = \"pause\"\n");
        let s = Scenario::parse(&text).unwrap();
        let mut sim = Simulation::new(s, None).unwrap();
        let mut after = 0;
        sim.run_until(60_000_000, |sim, _| {
            if sim.now_us() > 45_000_000 {
                after += 1;
            }
        });
        assert_eq!(after, 0);
    }

    #[test]
    fn rejected_command_leaves_state() {
        let s = Scenario::parse(TWO).unwrap();
        let mut sim = Simulation::new(s, None).unwrap();
        let err = sim.apply(&Command::Detach { parent: "RPN1.2".into() }).unwrap_err();
        assert_eq!(err.code, "slot_empty");
        let err = sim.apply(&Command::Kill { module: "RPN2".into() }).unwrap_err();
        assert_eq!(err.code, "not_running");
        assert_eq!(sim.fabric().graph().edge_count(), 0);
    }
}
