//! The physical world shared by all module processes: cables, scene and poses.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmc_core::channel::{ChannelError, Patchbay, Reading, ReceiverConfig, ReceiverEndpoint};
use vmc_core::environment::{branch_exists, layout, sample_sensors, LeafPose, Scene, SceneEvent};
use vmc_core::topology::{
    ModuleDescriptor, ModuleId, PlugAction, PlugEvent, SlotRef, TopologyGraph, WireDirection,
    CHILD_SLOTS, PARENT_PLUGS,
};
use vmc_core::SensorFrame;

use crate::command::Rejection;

/// One pin of a module.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pin {
    /// Resource leaving a leaf slot toward a child.
    SlotOut(ModuleId, u8),
    /// Successin arriving at a leaf slot from a child.
    SlotIn(ModuleId, u8),
    /// Successin leaving a parent plug.
    PlugOut(ModuleId, u8),
    /// Resource arriving at a parent plug.
    PlugIn(ModuleId, u8),
}

impl fmt::Display for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pin::SlotOut(m, k) => write!(f, "{m}.slot{k}.out"),
            Pin::SlotIn(m, k) => write!(f, "{m}.slot{k}.in"),
            Pin::PlugOut(m, k) => write!(f, "{m}.plug{k}.out"),
            Pin::PlugIn(m, k) => write!(f, "{m}.plug{k}.in"),
        }
    }
}

/// Transmit and receive pin joined by the cable of a plug event.
pub fn cable_of(event: &PlugEvent) -> (Pin, Pin) {
    let (parent, slot) = (event.parent.module.clone(), event.parent.slot);
    let child = event.child.clone();
    match event.direction {
        WireDirection::Down => (Pin::SlotOut(parent, slot), Pin::PlugIn(child, event.plug)),
        WireDirection::Up => (Pin::PlugOut(child, event.plug), Pin::SlotIn(parent, slot)),
    }
}

/// Stable 64-bit FNV-1a, used to derive per-stream seeds.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label))
}

pub struct Fabric {
    graph: TopologyGraph,
    patchbay: Patchbay<Pin, ChaCha8Rng>,
    scene: Scene,
    poses: BTreeMap<SlotRef, LeafPose>,
    receiver: ReceiverConfig,
    seed: u64,
    plug_events: u64,
}

impl Fabric {
    pub fn new(seed: u64, receiver: ReceiverConfig, scene: Scene) -> Self {
        Fabric {
            graph: TopologyGraph::new(),
            patchbay: Patchbay::new(),
            scene,
            poses: BTreeMap::new(),
            receiver,
            seed,
            plug_events: 0,
        }
    }

    /// Builds a fabric holding `graph`, cabled as its edges say.
    pub fn with_graph(seed: u64, receiver: ReceiverConfig, scene: Scene, graph: &TopologyGraph) -> Result<Self, Rejection> {
        let mut f = Fabric::new(seed, receiver, scene);
        for m in graph.modules() {
            f.add_module(m.clone())?;
        }
        let mut edges: Vec<(SlotRef, ModuleId, u8)> =
            graph.edges().map(|(s, e)| (s.clone(), e.child.clone(), e.plug)).collect();
        edges.sort_by_key(|(_, _, plug)| *plug);
        for (slot, child, _) in edges {
            f.attach(&slot, &child, 0)?;
        }
        Ok(f)
    }

    pub fn graph(&self) -> &TopologyGraph {
        &self.graph
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn poses(&self) -> &BTreeMap<SlotRef, LeafPose> {
        &self.poses
    }

    pub fn receiver_config(&self) -> &ReceiverConfig {
        &self.receiver
    }

    pub fn patchbay(&self) -> &Patchbay<Pin, ChaCha8Rng> {
        &self.patchbay
    }

    /// Plug plus unplug events applied to the channel layer so far.
    pub fn plug_event_count(&self) -> u64 {
        self.plug_events
    }

    pub fn add_module(&mut self, descriptor: ModuleDescriptor) -> Result<(), Rejection> {
        let id = descriptor.id.clone();
        self.graph.add_module(descriptor).map_err(topology_rejection)?;
        for k in 1..=CHILD_SLOTS {
            self.patchbay.add_output(Pin::SlotOut(id.clone(), k));
            self.add_input(Pin::SlotIn(id.clone(), k));
        }
        for p in 1..=PARENT_PLUGS {
            self.patchbay.add_output(Pin::PlugOut(id.clone(), p));
            self.add_input(Pin::PlugIn(id.clone(), p));
        }
        self.relayout();
        Ok(())
    }

    fn add_input(&mut self, pin: Pin) {
        let rng = stream_rng(self.seed, &format!("rx:{pin}"));
        self.patchbay.add_input(pin, ReceiverEndpoint::new(self.receiver, rng));
    }

    fn relayout(&mut self) {
        self.poses = layout(&self.graph, &self.scene.layout);
    }

    fn cable(&mut self, events: &[PlugEvent], now_us: u64) {
        for ev in events {
            let (tx, rx) = cable_of(ev);
            let res = match ev.action {
                PlugAction::Plug => self.patchbay.plug(&tx, &rx, now_us),
                PlugAction::Unplug => self.patchbay.unplug(&tx, &rx, now_us),
            };
            // The graph already accepted the event, so the pins are free or paired.
            res.unwrap_or_else(|e| panic!("patchbay out of step with topology at {tx} -> {rx}: {e}"));
            self.plug_events += 1;
        }
    }

    pub fn attach(&mut self, parent: &SlotRef, child: &ModuleId, now_us: u64) -> Result<[PlugEvent; 2], Rejection> {
        let events = self.graph.attach(&parent.module, parent.slot, child).map_err(topology_rejection)?;
        self.cable(&events, now_us);
        self.relayout();
        Ok(events)
    }

    pub fn detach(&mut self, parent: &SlotRef, now_us: u64) -> Result<(ModuleId, [PlugEvent; 2]), Rejection> {
        let (child, events) = self.graph.detach(&parent.module, parent.slot).map_err(topology_rejection)?;
        self.cable(&events, now_us);
        self.relayout();
        Ok((child, events))
    }

    pub fn apply_scene(&mut self, event: &SceneEvent) -> Result<(), Rejection> {
        if let Some(b) = event.target_branch() {
            if !branch_exists(&self.graph, b) {
                return Err(Rejection::new("unknown_branch", format!("no module or leaf {b}")));
            }
        }
        let next = self.scene.apply(event).map_err(|e| Rejection::new(e.code(), e.to_string()))?;
        let relayout = next.layout != self.scene.layout;
        self.scene = next;
        if relayout {
            self.relayout();
        }
        Ok(())
    }

    /// Sensor frame of a leaf node; noiseless when `rng` is `None`.
    pub fn sense(&self, leaf: &SlotRef, rng: Option<&mut ChaCha8Rng>) -> SensorFrame {
        match self.poses.get(leaf) {
            Some(pose) => sample_sensors(&self.scene, pose, leaf, rng),
            None => SensorFrame::new(0.0, 0.0),
        }
    }

    pub fn read(&mut self, pin: &Pin, now_us: u64) -> Result<Reading, ChannelError> {
        self.patchbay.read(pin, now_us)
    }

    /// Drives a transmit pin. Ideal cables carry the value exactly; analog
    /// ones clamp it to the encodable range.
    pub fn transmit(&mut self, pin: &Pin, value: f64, now_us: u64) -> Result<(), ChannelError> {
        if self.receiver.ideal {
            self.patchbay.transmit_exact(pin, value.max(0.0), now_us)
        } else {
            self.patchbay.transmit(pin, vmc_core::vmc::clamp_unit(value), now_us)
        }
    }

    pub fn silence(&mut self, pin: &Pin, now_us: u64) -> Result<(), ChannelError> {
        self.patchbay.silence(pin, now_us)
    }

    /// Parent slots of `module` in registry notation, by plug number.
    pub fn parent_ids(&self, module: &ModuleId) -> Vec<String> {
        self.graph.parents_of(module).into_iter().map(|(_, s)| s.to_string()).collect()
    }

    /// Children of `module` as `slot:child`.
    pub fn child_ids(&self, module: &ModuleId) -> Vec<String> {
        child_ids(&self.graph, module)
    }
}

pub fn child_ids(graph: &TopologyGraph, module: &ModuleId) -> Vec<String> {
    (1..=CHILD_SLOTS)
        .filter_map(|k| graph.child_at(&module.slot(k)).map(|e| format!("{k}:{}", e.child)))
        .collect()
}

pub fn topology_rejection(e: vmc_core::topology::TopologyError) -> Rejection {
    Rejection::new(e.code(), e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vmc_core::channel::LineLevel;

    fn id(s: &str) -> ModuleId {
        ModuleId::new(s).unwrap()
    }

    fn two_modules(receiver: ReceiverConfig) -> Fabric {
        let mut f = Fabric::new(1, receiver, Scene::default());
        f.add_module(ModuleDescriptor::new(id("RPN1"), 0)).unwrap();
        f.add_module(ModuleDescriptor::new(id("RPN2"), 1)).unwrap();
        f
    }

    #[test]
    fn attach_cables_both_directions() {
        let mut f = two_modules(ReceiverConfig::ideal());
        let slot = id("RPN1").slot(1);
        let events = f.attach(&slot, &id("RPN2"), 0).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(f.patchbay().cable_count(), 2);
        assert!(f.patchbay().is_plugged(&Pin::SlotOut(id("RPN1"), 1), &Pin::PlugIn(id("RPN2"), 1)));
        assert!(f.patchbay().is_plugged(&Pin::PlugOut(id("RPN2"), 1), &Pin::SlotIn(id("RPN1"), 1)));
        f.transmit(&Pin::SlotOut(id("RPN1"), 1), 0.4, 10).unwrap();
        assert_eq!(f.read(&Pin::PlugIn(id("RPN2"), 1), 20).unwrap().value, Some(0.4));
        f.detach(&slot, 30).unwrap();
        assert_eq!(f.patchbay().cable_count(), 0);
        assert_eq!(f.plug_event_count(), 4);
        assert!(!f.read(&Pin::PlugIn(id("RPN2"), 1), 40).unwrap().live);
    }

    #[test]
    fn rejected_attach_leaves_cables_alone() {
        let mut f = two_modules(ReceiverConfig::ideal());
        let err = f.attach(&id("RPN1").slot(1), &id("RPN1"), 0).unwrap_err();
        assert_eq!(err.code, "cycle");
        assert_eq!(f.patchbay().cable_count(), 0);
        f.attach(&id("RPN1").slot(1), &id("RPN2"), 0).unwrap();
        let err = f.attach(&id("RPN1").slot(1), &id("RPN2"), 0).unwrap_err();
        assert_eq!(err.code, "slot_occupied");
        assert_eq!(f.patchbay().cable_count(), 2);
    }

    #[test]
    fn ideal_cables_are_exact_and_analog_lines_saturate() {
        let mut f = two_modules(ReceiverConfig::ideal());
        f.attach(&id("RPN1").slot(2), &id("RPN2"), 0).unwrap();
        f.transmit(&Pin::SlotOut(id("RPN1"), 2), 1.7, 0).unwrap();
        assert_eq!(f.read(&Pin::PlugIn(id("RPN2"), 1), 1).unwrap().value, Some(1.7));

        let mut f = two_modules(ReceiverConfig::default());
        f.attach(&id("RPN1").slot(2), &id("RPN2"), 0).unwrap();
        f.transmit(&Pin::SlotOut(id("RPN1"), 2), 1.7, 0).unwrap();
        let rx = f.patchbay().input(&Pin::PlugIn(id("RPN2"), 1)).unwrap();
        assert_eq!(rx.line_level(), LineLevel::Driven(1.0));
    }

    #[test]
    fn scene_events_check_branches() {
        let mut f = two_modules(ReceiverConfig::ideal());
        let err = f.apply_scene(&SceneEvent::SetTilt { branch: "RPN9".into(), degrees: 10.0 }).unwrap_err();
        assert_eq!(err.code, "unknown_branch");
        f.apply_scene(&SceneEvent::SetTilt { branch: "RPN2".into(), degrees: 90.0 }).unwrap();
        let frame = f.sense(&id("RPN2").slot(1), None);
        assert!(frame.uprightness < 1e-12);
    }

    #[test]
    fn seeds_differ_per_label() {
        assert_ne!(stream_seed(1, "a"), stream_seed(1, "b"));
        assert_ne!(stream_seed(1, "a"), stream_seed(2, "a"));
        assert_eq!(stream_seed(7, "rx"), stream_seed(7, "rx"));
    }
}
