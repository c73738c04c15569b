//! Real-time runtime: one OS thread per module.
//!
//! Module threads share nothing but the fabric, which they lock for the
//! few microseconds of one iteration. Simulated time runs at
//! `time_scale` times wall-clock time; sampling instants are taken while
//! holding the fabric lock so the channel sees a monotone clock.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration as StdDuration, Instant};

use chrono::{DateTime, Duration, Utc};
use vmc_core::topology::{ModuleId, SlotRef};
use vmc_core::vmc::NodeParams;

use crate::command::{Command, Rejection};
use crate::des::{write_atomic, RunError, RunOptions, RunOutput};
use crate::fabric::Fabric;
use crate::net::control::Handler;
use crate::process::{Boot, ModuleProcess};
use crate::report::evaluate;
use crate::scenario::Scenario;
use crate::snapshot::SnapshotStore;
use crate::telemetry::{CsvLog, TelemetryError, TelemetryRecord};

/// Receives every record as it is produced, from module threads.
pub type Sink = Arc<dyn Fn(&TelemetryRecord) + Send + Sync>;

const TICK: StdDuration = StdDuration::from_millis(5);

struct Clock {
    start: Instant,
    epoch: DateTime<Utc>,
    scale: f64,
}

impl Clock {
    fn now_us(&self) -> u64 {
        (self.start.elapsed().as_secs_f64() * self.scale * 1e6) as u64
    }

    fn wall(&self, sim_us: u64) -> StdDuration {
        StdDuration::from_secs_f64(sim_us as f64 / 1e6 / self.scale)
    }
}

struct Worker {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

struct Shared {
    scenario: Scenario,
    params: NodeParams,
    fabric: Mutex<Fabric>,
    clock: Clock,
    store: Option<SnapshotStore>,
    sink: Sink,
    paused: AtomicBool,
    stop: AtomicBool,
    workers: Mutex<BTreeMap<ModuleId, Worker>>,
    incarnations: Mutex<BTreeMap<ModuleId, u32>>,
    registry: Arc<RwLock<String>>,
    registry_path: Option<PathBuf>,
    warnings: Mutex<Vec<String>>,
    iterations: AtomicU64,
}

#[derive(Debug, Clone, Default)]
pub struct LiveOptions {
    pub snapshot_dir: Option<PathBuf>,
    /// Rewritten on every topology change.
    pub registry_path: Option<PathBuf>,
}

pub struct LiveRuntime {
    shared: Arc<Shared>,
    script: Option<JoinHandle<()>>,
}

impl LiveRuntime {
    /// Powers the initial modules and starts playing the scenario script.
    pub fn start(scenario: Scenario, opts: LiveOptions, sink: Sink) -> Result<LiveRuntime, Rejection> {
        let graph = scenario.initial_graph().map_err(|e| Rejection::new("invalid_scenario", e.to_string()))?;
        let fabric =
            Fabric::with_graph(scenario.runtime.seed, scenario.channel.receiver(), scenario.scene.clone(), &graph)?;
        let store = match &opts.snapshot_dir {
            Some(d) => Some(SnapshotStore::open(d).map_err(|e| Rejection::new("snapshot", e.to_string()))?),
            None => None,
        };
        let scale = if scenario.runtime.time_scale > 0.0 { scenario.runtime.time_scale } else { 1.0 };
        let shared = Arc::new(Shared {
            params: scenario.node_params(),
            registry: Arc::new(RwLock::new(fabric.graph().registry_export())),
            fabric: Mutex::new(fabric),
            clock: Clock { start: Instant::now(), epoch: Utc::now(), scale },
            store,
            sink,
            paused: AtomicBool::new(false),
            stop: AtomicBool::new(false),
            workers: Mutex::new(BTreeMap::new()),
            incarnations: Mutex::new(BTreeMap::new()),
            registry_path: opts.registry_path,
            warnings: Mutex::new(Vec::new()),
            iterations: AtomicU64::new(0),
            scenario,
        });
        shared.publish_registry();
        {
            let mut workers = shared.workers.lock().expect("workers");
            for m in shared.scenario.modules.iter().filter(|m| m.powered) {
                let id = m.id.clone();
                Shared::boot(&shared, &mut workers, id);
            }
        }
        let script = {
            let shared = shared.clone();
            thread::Builder::new()
                .name("script".into())
                .spawn(move || play_script(&shared))
                .map_err(|e| Rejection::new("spawn", e.to_string()))?
        };
        Ok(LiveRuntime { shared, script: Some(script) })
    }

    pub fn apply(&self, command: &Command) -> Result<(), Rejection> {
        Shared::apply(&self.shared, command)
    }

    /// Command handler for a [`CommandServer`](crate::net::CommandServer).
    pub fn handler(&self) -> Handler {
        let shared = self.shared.clone();
        Arc::new(move |c| Shared::apply(&shared, &c))
    }

    /// Registry text kept current for the HTTP endpoint.
    pub fn registry(&self) -> Arc<RwLock<String>> {
        self.shared.registry.clone()
    }

    pub fn now_us(&self) -> u64 {
        self.shared.clock.now_us()
    }

    pub fn epoch(&self) -> DateTime<Utc> {
        self.shared.clock.epoch
    }

    pub fn iterations(&self) -> u64 {
        self.shared.iterations.load(Ordering::Relaxed)
    }

    pub fn is_running(&self, id: &ModuleId) -> bool {
        self.shared.workers.lock().expect("workers").get(id).is_some_and(|w| !w.handle.is_finished())
    }

    pub fn warnings(&self) -> Vec<String> {
        self.shared.warnings.lock().expect("warnings").clone()
    }

    /// Blocks until simulated time reaches `sim_s` seconds.
    pub fn wait_until(&self, sim_s: f64) {
        let target = (sim_s * 1e6) as u64;
        loop {
            let now = self.now_us();
            if now >= target {
                return;
            }
            thread::sleep(self.shared.clock.wall(target - now).min(StdDuration::from_millis(100)));
        }
    }

    /// Stops the script and every module thread.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.script.take() {
            let _ = s.join();
        }
        let workers = std::mem::take(&mut *self.shared.workers.lock().expect("workers"));
        for w in workers.values() {
            w.stop.store(true, Ordering::SeqCst);
        }
        for (_, w) in workers {
            let _ = w.handle.join();
        }
    }
}

impl Drop for LiveRuntime {
    fn drop(&mut self) {
        self.stop_now();
    }
}

impl Shared {
    fn warn(&self, msg: String) {
        log::warn!("{msg}");
        self.warnings.lock().expect("warnings").push(msg);
    }

    fn publish_registry(&self) {
        let text = self.fabric.lock().expect("fabric").graph().registry_export();
        *self.registry.write().expect("registry") = text.clone();
        if let Some(p) = &self.registry_path {
            if let Err(e) = write_atomic(p, &text) {
                self.warn(format!("registry {}: {e}", p.display()));
            }
        }
    }

    fn boot(this: &Arc<Shared>, workers: &mut BTreeMap<ModuleId, Worker>, id: ModuleId) {
        let inc = {
            let mut incs = this.incarnations.lock().expect("incarnations");
            let i = incs.entry(id.clone()).and_modify(|i| *i += 1).or_insert(0);
            *i
        };
        let (process, boot) = ModuleProcess::boot(id.clone(), this.scenario.runtime.seed, inc, this.store.clone());
        if let Boot::Recovered { reason } = boot {
            this.warn(format!("{id}: unusable snapshot, cold start ({reason})"));
        }
        let stop = Arc::new(AtomicBool::new(false));
        let (shared, flag) = (this.clone(), stop.clone());
        match thread::Builder::new().name(format!("module-{id}")).spawn(move || run_module(&shared, process, &flag)) {
            Ok(handle) => {
                workers.insert(id, Worker { stop, handle });
            }
            Err(e) => this.warn(format!("{id}: cannot spawn thread: {e}")),
        }
    }

    fn module(&self, text: &str) -> Result<ModuleId, Rejection> {
        let id = ModuleId::new(text.to_string()).map_err(|e| Rejection::new(e.code(), e.to_string()))?;
        if !self.fabric.lock().expect("fabric").graph().contains(&id) {
            return Err(Rejection::new("unknown_module", format!("no module {id}")));
        }
        Ok(id)
    }

    fn apply(this: &Arc<Shared>, command: &Command) -> Result<(), Rejection> {
        let slot = |s: &str| SlotRef::parse_registry(s).map_err(|e| Rejection::new(e.code(), e.to_string()));
        // Lock order: workers, then fabric.
        let mut workers = this.workers.lock().expect("workers");
        let running = |w: &BTreeMap<ModuleId, Worker>, id: &ModuleId| w.get(id).is_some_and(|w| !w.handle.is_finished());
        match command {
            Command::Attach { parent, child } => {
                let parent = slot(parent)?;
                let child = this.module(child)?;
                {
                    let mut fabric = this.fabric.lock().expect("fabric");
                    let now = this.clock.now_us();
                    fabric.attach(&parent, &child, now)?;
                }
                this.publish_registry();
                if !running(&workers, &child) {
                    Shared::boot(this, &mut workers, child);
                }
            }
            Command::Detach { parent } => {
                let parent = slot(parent)?;
                {
                    let mut fabric = this.fabric.lock().expect("fabric");
                    let now = this.clock.now_us();
                    fabric.detach(&parent, now)?;
                }
                this.publish_registry();
            }
            Command::SceneEvent { event } => this.fabric.lock().expect("fabric").apply_scene(event)?,
            Command::Kill { module } => {
                let id = this.module(module)?;
                if !running(&workers, &id) {
                    return Err(Rejection::new("not_running", format!("{id} is not running")));
                }
                let w = workers.remove(&id).expect("running worker");
                w.stop.store(true, Ordering::SeqCst);
                let _ = w.handle.join();
                let mut fabric = this.fabric.lock().expect("fabric");
                let now = this.clock.now_us();
                ModuleProcess::release_outputs(&id, &mut fabric, now);
            }
            Command::Restart { module } => {
                let id = this.module(module)?;
                if running(&workers, &id) {
                    return Err(Rejection::new("running", format!("{id} is already running")));
                }
                Shared::boot(this, &mut workers, id);
            }
            Command::Pause => this.paused.store(true, Ordering::SeqCst),
            Command::Resume => this.paused.store(false, Ordering::SeqCst),
        }
        Ok(())
    }

    /// Sleeps `sim_us` of simulated time; false if asked to stop meanwhile.
    fn sleep_sim(&self, sim_us: u64, stop: &AtomicBool) -> bool {
        let deadline = Instant::now() + self.clock.wall(sim_us);
        loop {
            if stop.load(Ordering::SeqCst) || self.stop.load(Ordering::SeqCst) {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return true;
            }
            thread::sleep((deadline - now).min(TICK));
        }
    }
}

fn run_module(shared: &Shared, mut process: ModuleProcess, stop: &AtomicBool) {
    let (min_w, max_w) = (shared.scenario.runtime.min_wait, shared.scenario.runtime.max_wait);
    let first = process.first_wake_us(max_w);
    if !shared.sleep_sim(first, stop) {
        return;
    }
    loop {
        let wait = process.next_wait_us(min_w, max_w);
        if !shared.paused.load(Ordering::SeqCst) {
            let result = {
                let mut fabric = shared.fabric.lock().expect("fabric");
                let now = shared.clock.now_us();
                let ts = shared.clock.epoch + Duration::microseconds(now as i64);
                process.iterate(&mut fabric, &shared.params, now, ts)
            };
            match result {
                Ok(it) => {
                    shared.iterations.fetch_add(1, Ordering::Relaxed);
                    (shared.sink)(&it.record);
                }
                Err(e) => {
                    shared.warn(format!("{} halted: {e}", process.id()));
                    let mut fabric = shared.fabric.lock().expect("fabric");
                    let now = shared.clock.now_us();
                    ModuleProcess::release_outputs(process.id(), &mut fabric, now);
                    return;
                }
            }
        }
        if !shared.sleep_sim(wait, stop) {
            return;
        }
    }
}

fn play_script(shared: &Arc<Shared>) {
    let never = AtomicBool::new(false);
    for (i, ev) in shared.scenario.events.iter().enumerate() {
        let at = (ev.at * 1e6) as u64;
        let now = shared.clock.now_us();
        if at > now && !shared.sleep_sim(at - now, &never) {
            return;
        }
        if let Err(e) = Shared::apply(shared, &ev.command) {
            shared.warn(format!("script event {i} ({}) rejected: {e}", ev.command.name()));
        }
    }
}

/// Plays a scenario in real time and evaluates its checks.
///
/// Writes `telemetry.csv`, `registry.txt`, `snapshots/` and the reports
/// under `out_dir` like a fast-forward run. `tap` sees every record too,
/// for example to publish it.
pub fn run_real_time(scenario: &Scenario, opts: &RunOptions, tap: Option<Sink>) -> Result<RunOutput, RunError> {
    let records: Arc<Mutex<Vec<TelemetryRecord>>> = Arc::default();
    let csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("telemetry.csv");
            if path.exists() {
                fs::remove_file(&path)?;
            }
            Some(Arc::new(Mutex::new(CsvLog::open(&path)?)))
        }
        None => None,
    };
    let failure: Arc<Mutex<Option<TelemetryError>>> = Arc::default();
    let sink: Sink = {
        let (records, csv, failure) = (records.clone(), csv.clone(), failure.clone());
        Arc::new(move |r: &TelemetryRecord| {
            if let Some(csv) = &csv {
                if let Err(e) = csv.lock().expect("csv").append(r) {
                    failure.lock().expect("failure").get_or_insert(e);
                }
            }
            if let Some(tap) = &tap {
                tap(r);
            }
            records.lock().expect("records").push(r.clone());
        })
    };
    let live_opts = LiveOptions {
        snapshot_dir: opts.snapshot_dir.clone().or_else(|| opts.out_dir.as_ref().map(|d| d.join("snapshots"))),
        registry_path: opts.out_dir.as_ref().map(|d| d.join("registry.txt")),
    };
    let duration = opts.duration.unwrap_or(scenario.runtime.duration);
    let rt = LiveRuntime::start(scenario.clone(), live_opts, sink)?;
    rt.wait_until(duration);
    let (epoch, warnings) = (rt.epoch(), rt.warnings());
    rt.shutdown();

    if let Some(e) = failure.lock().expect("failure").take() {
        return Err(e.into());
    }
    let mut records = std::mem::take(&mut *records.lock().expect("records"));
    records.sort_by(|a, b| (a.ts, &a.module).cmp(&(b.ts, &b.module)));
    let mut scenario_run = scenario.clone();
    scenario_run.runtime.duration = duration;
    let report = evaluate(&scenario_run, &records, &epoch, warnings);
    if let Some(dir) = &opts.out_dir {
        if let Some(csv) = csv {
            csv.lock().expect("csv").flush()?;
        }
        fs::write(dir.join("report.txt"), report.to_text())?;
        fs::write(dir.join("report.json"), report.to_json())?;
    }
    Ok(RunOutput { records, report, epoch })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAIR: &str = r#"
        name = "pair"
        [runtime]
        time_scale = 40.0
        duration = 20.0
        [channel]
        ideal = true
        [[modules]]
        id = "RPN1"
        [[modules]]
        id = "RPN2"
        level = 1
        powered = false
        [[events]]
        at = 4.0
        op = "attach"
        parent = "RPN1.2"
        child = "RPN2"
    "#;

    #[test]
    fn modules_run_on_their_own_threads() {
        let seen: Arc<Mutex<Vec<TelemetryRecord>>> = Arc::default();
        let sink: Sink = {
            let seen = seen.clone();
            Arc::new(move |r: &TelemetryRecord| seen.lock().unwrap().push(r.clone()))
        };
        let rt = LiveRuntime::start(Scenario::parse(PAIR).unwrap(), LiveOptions::default(), sink).unwrap();
        rt.wait_until(12.0);
        let rpn2 = ModuleId::new("RPN2").unwrap();
        assert!(rt.is_running(&rpn2));
        assert!(rt.registry().read().unwrap().contains("RPN1.2 -> RPN2"));
        rt.apply(&Command::Kill { module: "RPN2".into() }).unwrap();
        assert!(!rt.is_running(&rpn2));
        assert_eq!(rt.apply(&Command::Kill { module: "RPN2".into() }).unwrap_err().code, "not_running");
        rt.apply(&Command::Restart { module: "RPN2".into() }).unwrap();
        assert!(rt.is_running(&rpn2));
        rt.shutdown();
        let seen = seen.lock().unwrap();
        assert!(seen.iter().filter(|r| r.module == "RPN1").count() >= 8);
        assert!(seen.iter().any(|r| r.module == "RPN2" && r.parent_ids == ["RPN1.2"]));
    }
}
