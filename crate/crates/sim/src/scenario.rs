//! Scenario documents: genome, modules, scene, timed script and post-run checks.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vmc_core::channel::{ReceiverConfig, SamplingModel};
use vmc_core::environment::{branch_exists, Scene};
use vmc_core::topology::{ModuleDescriptor, ModuleId, SlotRef, TopologyGraph};
use vmc_core::vmc::NodeParams;
use vmc_core::Genome;

use crate::command::Command;

pub const CHARACTERIZATION: &str = include_str!("../scenarios/characterization.toml");
pub const GROWTH: &str = include_str!("../scenarios/growth.toml");

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    FastForward,
    RealTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Bounds of the randomized wait between iterations, seconds.
    pub min_wait: f64,
    pub max_wait: f64,
    /// Maximum leaf count L; a leaf produces at most `1/L` successin.
    pub max_leaves: u32,
    /// Simulated run length in seconds.
    pub duration: f64,
    /// Iterations averaged by the growth advisor.
    pub advice_window: usize,
    /// Simulated seconds per wall-clock second in real-time mode.
    pub time_scale: f64,
    pub root_resource: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            seed: 1,
            mode: Mode::FastForward,
            min_wait: 0.8,
            max_wait: 1.2,
            max_leaves: NodeParams::DEFAULT_MAX_LEAVES,
            duration: 600.0,
            advice_window: vmc_core::advice::DEFAULT_WINDOW,
            time_scale: 1.0,
            root_resource: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub ideal: bool,
    pub sampling: SamplingModel,
    pub poll_period_us: u64,
    pub capacity: usize,
    pub threshold: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let r = ReceiverConfig::default();
        ChannelConfig {
            ideal: r.ideal,
            sampling: r.sampling,
            poll_period_us: r.poll_period_us,
            capacity: r.capacity,
            threshold: r.threshold,
        }
    }
}

impl ChannelConfig {
    pub fn receiver(&self) -> ReceiverConfig {
        ReceiverConfig {
            capacity: self.capacity,
            threshold: self.threshold,
            poll_period_us: self.poll_period_us,
            sampling: self.sampling,
            ideal: self.ideal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleDecl {
    pub id: ModuleId,
    #[serde(default)]
    pub level: u8,
    /// Whether the module runs from time zero. An unpowered module boots
    /// when it is attached or restarted.
    #[serde(default = "yes")]
    pub powered: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentDecl {
    /// Leaf slot in registry notation, `RPN1.1`.
    pub parent: String,
    pub child: ModuleId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    /// Seconds from the start of the run.
    pub at: f64,
    #[serde(flatten)]
    pub command: Command,
}

/// A post-run assertion over the telemetry between `from` and `to` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub from: f64,
    pub to: f64,
    #[serde(flatten)]
    pub kind: CheckKind,
}

/// Shares are time-averaged slot resource over total generated resource.
/// `leaf` names a slot (`RPN2-1`); for an occupied slot its share is the
/// share of the whole branch behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckKind {
    ShareNear { leaf: String, target: f64, tolerance: f64 },
    ShareAbove { leaf: String, min: f64 },
    /// `leaf` has a larger share than `over`.
    Favours { leaf: String, over: String },
    /// The advisor ranks `leaf` first at the end of the window.
    AdviceTop { leaf: String },
    /// The share is strictly lower than over the `baseline` window.
    ShareDrops { leaf: String, baseline: [f64; 2] },
}

impl CheckKind {
    pub fn leaves(&self) -> Vec<&str> {
        match self {
            CheckKind::ShareNear { leaf, .. }
            | CheckKind::ShareAbove { leaf, .. }
            | CheckKind::AdviceTop { leaf }
            | CheckKind::ShareDrops { leaf, .. } => vec![leaf],
            CheckKind::Favours { leaf, over } => vec![leaf, over],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub genome: Genome,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub modules: Vec<ModuleDecl>,
    #[serde(default)]
    pub attachments: Vec<AttachmentDecl>,
    #[serde(default)]
    pub scene: Scene,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    #[serde(default)]
    pub checks: Vec<Check>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Loads a scenario file, or a built-in scenario by name
    /// (`characterization`, `growth`).
    pub fn load(path_or_name: &str) -> Result<Scenario, ScenarioError> {
        if let Some(text) = builtin(path_or_name) {
            return Scenario::parse(text);
        }
        let text = fs::read_to_string(Path::new(path_or_name))
            .map_err(|source| ScenarioError::Io { path: path_or_name.to_string(), source })?;
        Scenario::parse(&text)
    }

    pub fn node_params(&self) -> NodeParams {
        NodeParams {
            root_resource: self.runtime.root_resource,
            ..NodeParams::new(self.genome, self.runtime.max_leaves)
        }
    }

    /// Topology at time zero.
    pub fn initial_graph(&self) -> Result<TopologyGraph, ScenarioError> {
        let mut g = TopologyGraph::new();
        for m in &self.modules {
            g.add_module(ModuleDescriptor::new(m.id.clone(), m.level))
                .map_err(|e| invalid(format!("module {}: {e}", m.id)))?;
        }
        for a in &self.attachments {
            let slot = SlotRef::parse_registry(&a.parent)
                .map_err(|e| invalid(format!("attachment {}: {e}", a.parent)))?;
            g.attach(&slot.module, slot.slot, &a.child)
                .map_err(|e| invalid(format!("attachment {} -> {}: {e}", a.parent, a.child)))?;
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.genome.validate().map_err(|e| invalid(e.to_string()))?;
        let rt = &self.runtime;
        if !(rt.min_wait > 0.0 && rt.min_wait <= rt.max_wait && rt.max_wait.is_finite()) {
            return Err(invalid(format!("waits must satisfy 0 < min_wait <= max_wait, got [{}, {}]", rt.min_wait, rt.max_wait)));
        }
        if rt.max_leaves == 0 {
            return Err(invalid("max_leaves must be positive"));
        }
        if !(rt.duration > 0.0 && rt.duration.is_finite()) {
            return Err(invalid("duration must be positive"));
        }
        if rt.advice_window == 0 {
            return Err(invalid("advice_window must be positive"));
        }
        if !(rt.time_scale > 0.0 && rt.time_scale.is_finite()) {
            return Err(invalid("time_scale must be positive"));
        }
        if !(rt.root_resource >= 0.0 && rt.root_resource.is_finite()) {
            return Err(invalid("root_resource must be nonnegative"));
        }
        let ch = &self.channel;
        if ch.capacity == 0 || ch.poll_period_us == 0 || !(0.0..1.0).contains(&ch.threshold) {
            return Err(invalid("channel needs capacity > 0, poll_period_us > 0, threshold in [0,1)"));
        }
        if self.modules.is_empty() {
            return Err(invalid("no modules"));
        }
        let mut graph = self.initial_graph()?;
        self.scene.validate().map_err(|e| invalid(format!("scene: {e}")))?;
        let mut scene = self.scene.clone();
        for key in scene.shades.keys().chain(scene.tilts.keys()) {
            if !branch_exists(&graph, key) {
                return Err(invalid(format!("scene references unknown branch {key}")));
            }
        }
        // Dry run of the script against the evolving topology and scene.
        let mut last = 0.0;
        let mut killed: BTreeSet<ModuleId> =
            self.modules.iter().filter(|m| !m.powered).map(|m| m.id.clone()).collect();
        for (i, ev) in self.events.iter().enumerate() {
            if !(ev.at >= last && ev.at.is_finite()) {
                return Err(invalid(format!("event {i} at {} is out of order", ev.at)));
            }
            last = ev.at;
            let ctx = |e: String| invalid(format!("event {i} ({}) at {}: {e}", ev.command.name(), ev.at));
            match &ev.command {
                Command::Attach { parent, child } => {
                    let slot = SlotRef::parse_registry(parent).map_err(|e| ctx(e.to_string()))?;
                    let child = ModuleId::new(child.clone()).map_err(|e| ctx(e.to_string()))?;
                    graph.attach(&slot.module, slot.slot, &child).map_err(|e| ctx(e.to_string()))?;
                    killed.remove(&child);
                }
                Command::Detach { parent } => {
                    let slot = SlotRef::parse_registry(parent).map_err(|e| ctx(e.to_string()))?;
                    graph.detach(&slot.module, slot.slot).map_err(|e| ctx(e.to_string()))?;
                }
                Command::SceneEvent { event } => {
                    if let Some(b) = event.target_branch() {
                        if !branch_exists(&graph, b) {
                            return Err(ctx(format!("unknown branch {b}")));
                        }
                    }
                    scene = scene.apply(event).map_err(|e| ctx(e.to_string()))?;
                }
                Command::Kill { module } | Command::Restart { module } => {
                    let id = ModuleId::new(module.clone()).map_err(|e| ctx(e.to_string()))?;
                    if !graph.contains(&id) {
                        return Err(ctx(format!("unknown module {id}")));
                    }
                    let is_kill = matches!(ev.command, Command::Kill { .. });
                    if is_kill && !killed.insert(id.clone()) {
                        return Err(ctx(format!("{id} is already stopped")));
                    }
                    if !is_kill && !killed.remove(&id) {
                        return Err(ctx(format!("{id} is running")));
                    }
                }
                Command::Pause | Command::Resume => {}
            }
        }
        let known: BTreeSet<&ModuleId> = self.modules.iter().map(|m| &m.id).collect();
        for c in &self.checks {
            if !(c.from >= 0.0 && c.from < c.to) {
                return Err(invalid(format!("check {:?}: empty window", c.name)));
            }
            for leaf in c.kind.leaves() {
                let slot = SlotRef::parse_leaf(leaf).map_err(|e| invalid(format!("check {:?}: {e}", c.name)))?;
                if !known.contains(&slot.module) {
                    return Err(invalid(format!("check {:?}: unknown module {}", c.name, slot.module)));
                }
            }
            if let CheckKind::ShareDrops { baseline, .. } = &c.kind {
                if !(baseline[0] >= 0.0 && baseline[0] < baseline[1]) {
                    return Err(invalid(format!("check {:?}: empty baseline window", c.name)));
                }
            }
        }
        Ok(())
    }

    /// Copy with a different seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.runtime.seed = seed;
        self
    }
}

pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "characterization" => Some(CHARACTERIZATION),
        "growth" => Some(GROWTH),
        _ => None,
    }
}
