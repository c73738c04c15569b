//! Rooted graph of Y-modules.
//!
//! Every module has two child slots (its leaf nodes) and up to three parent
//! plugs on its root node. An edge joins a parent's leaf slot to one of the
//! child's parent plugs and is carried by two wires: resource flows down,
//! successin flows up.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

pub const CHILD_SLOTS: u8 = 2;
pub const PARENT_PLUGS: u8 = 3;

/// Module name, e.g. `RPN1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct ModuleId(String);

impl ModuleId {
    pub fn new(id: impl Into<String>) -> Result<Self, TopologyError> {
        let id = id.into();
        let valid = !id.is_empty()
            && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            && !id.starts_with('_');
        if valid {
            Ok(ModuleId(id))
        } else {
            Err(TopologyError::InvalidId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn slot(&self, slot: u8) -> SlotRef {
        SlotRef { module: self.clone(), slot }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ModuleId {
    type Err = TopologyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModuleId::new(s)
    }
}

/// One leaf slot of a module, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotRef {
    pub module: ModuleId,
    pub slot: u8,
}

impl SlotRef {
    /// Leaf-node name as printed on the hardware, e.g. `RPN1-1`.
    pub fn leaf_id(&self) -> String {
        format!("{}-{}", self.module, self.slot)
    }

    /// Parses a leaf name such as `RPN2-1`.
    pub fn parse_leaf(s: &str) -> Result<Self, TopologyError> {
        Self::parse_with(s, '-')
    }

    /// Parses a registry slot such as `RPN2.1`.
    pub fn parse_registry(s: &str) -> Result<Self, TopologyError> {
        Self::parse_with(s, '.')
    }

    fn parse_with(s: &str, sep: char) -> Result<Self, TopologyError> {
        let (module, slot) =
            s.rsplit_once(sep).ok_or_else(|| TopologyError::InvalidId(s.to_string()))?;
        let slot: u8 = slot.parse().map_err(|_| TopologyError::InvalidId(s.to_string()))?;
        if slot == 0 || slot > CHILD_SLOTS {
            return Err(TopologyError::InvalidSlot(s.to_string()));
        }
        Ok(SlotRef { module: ModuleId::new(module)?, slot })
    }
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.module, self.slot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModuleDescriptor {
    pub id: ModuleId,
    /// Size class: 0 for the base module, larger for smaller modules.
    pub level: u8,
}

impl ModuleDescriptor {
    pub fn new(id: ModuleId, level: u8) -> Self {
        ModuleDescriptor { id, level }
    }
}

/// Direction of one logical wire of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WireDirection {
    /// Resource, parent leaf slot to child root.
    Down,
    /// Successin, child root to parent leaf slot.
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlugAction {
    Plug,
    Unplug,
}

/// Channel-layer consequence of a topology change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlugEvent {
    pub action: PlugAction,
    pub direction: WireDirection,
    pub parent: SlotRef,
    pub child: ModuleId,
    /// Parent plug of the child, 1-based.
    pub plug: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub child: ModuleId,
    pub plug: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyError {
    InvalidId(String),
    InvalidSlot(String),
    UnknownModule(ModuleId),
    DuplicateModule(ModuleId),
    SlotOccupied(SlotRef),
    SlotEmpty(SlotRef),
    NoFreePlug(ModuleId),
    Cycle { parent: ModuleId, child: ModuleId },
}

impl TopologyError {
    /// Short machine-readable reason.
    pub fn code(&self) -> &'static str {
        match self {
            TopologyError::InvalidId(_) => "invalid_id",
            TopologyError::InvalidSlot(_) => "invalid_slot",
            TopologyError::UnknownModule(_) => "unknown_module",
            TopologyError::DuplicateModule(_) => "duplicate_module",
            TopologyError::SlotOccupied(_) => "slot_occupied",
            TopologyError::SlotEmpty(_) => "slot_empty",
            TopologyError::NoFreePlug(_) => "no_free_plug",
            TopologyError::Cycle { .. } => "cycle",
        }
    }
}

impl fmt::Display for TopologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyError::InvalidId(s) => write!(f, "invalid identifier `{s}`"),
            TopologyError::InvalidSlot(s) => write!(f, "invalid slot `{s}`"),
            TopologyError::UnknownModule(m) => write!(f, "unknown module {m}"),
            TopologyError::DuplicateModule(m) => write!(f, "module {m} already exists"),
            TopologyError::SlotOccupied(s) => write!(f, "slot {s} is occupied"),
            TopologyError::SlotEmpty(s) => write!(f, "slot {s} is empty"),
            TopologyError::NoFreePlug(m) => write!(f, "module {m} has no free parent plug"),
            TopologyError::Cycle { parent, child } => {
                write!(f, "attaching {child} below {parent} would create a cycle")
            }
        }
    }
}

impl core::error::Error for TopologyError {}

/// Malformed or inconsistent registry document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RegistryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl core::error::Error for RegistryError {}

#[derive(Debug, Clone, Default)]
pub struct TopologyGraph {
    modules: BTreeMap<ModuleId, ModuleDescriptor>,
    edges: BTreeMap<SlotRef, Edge>,
}

/// Graphs are equal when they have the same modules and the same
/// slot-to-child connections. Plug numbering is not part of connectivity.
impl PartialEq for TopologyGraph {
    fn eq(&self, other: &Self) -> bool {
        self.modules == other.modules
            && self.edges.len() == other.edges.len()
            && self.edges.iter().zip(&other.edges).all(|((s1, e1), (s2, e2))| s1 == s2 && e1.child == e2.child)
    }
}

impl TopologyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_module(&mut self, descriptor: ModuleDescriptor) -> Result<(), TopologyError> {
        if self.modules.contains_key(&descriptor.id) {
            return Err(TopologyError::DuplicateModule(descriptor.id));
        }
        self.modules.insert(descriptor.id.clone(), descriptor);
        Ok(())
    }

    pub fn module(&self, id: &ModuleId) -> Option<&ModuleDescriptor> {
        self.modules.get(id)
    }

    pub fn contains(&self, id: &ModuleId) -> bool {
        self.modules.contains_key(id)
    }

    pub fn modules(&self) -> impl Iterator<Item = &ModuleDescriptor> {
        self.modules.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&SlotRef, &Edge)> {
        self.edges.iter()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn child_at(&self, slot: &SlotRef) -> Option<&Edge> {
        self.edges.get(slot)
    }

    /// Parent slots feeding `child`, with the plug each one uses.
    pub fn parents_of(&self, child: &ModuleId) -> Vec<(u8, SlotRef)> {
        let mut parents: Vec<(u8, SlotRef)> = self
            .edges
            .iter()
            .filter(|(_, e)| &e.child == child)
            .map(|(s, e)| (e.plug, s.clone()))
            .collect();
        parents.sort();
        parents
    }

    /// Modules without parents.
    pub fn roots(&self) -> Vec<ModuleId> {
        let children: BTreeSet<&ModuleId> = self.edges.values().map(|e| &e.child).collect();
        self.modules.keys().filter(|m| !children.contains(m)).cloned().collect()
    }

    /// Leaf slots with nothing attached.
    pub fn free_slots(&self) -> Vec<SlotRef> {
        self.modules
            .keys()
            .flat_map(|m| (1..=CHILD_SLOTS).map(move |s| m.slot(s)))
            .filter(|s| !self.edges.contains_key(s))
            .collect()
    }

    /// Modules reachable downstream of `from`, including itself.
    pub fn descendants(&self, from: &ModuleId) -> BTreeSet<ModuleId> {
        let mut seen = BTreeSet::new();
        let mut stack = alloc::vec![from.clone()];
        while let Some(m) = stack.pop() {
            if !seen.insert(m.clone()) {
                continue;
            }
            for s in 1..=CHILD_SLOTS {
                if let Some(e) = self.edges.get(&m.slot(s)) {
                    stack.push(e.child.clone());
                }
            }
        }
        seen
    }

    pub fn is_acyclic(&self) -> bool {
        // Kahn's algorithm over module-level edges.
        let mut indegree: BTreeMap<&ModuleId, usize> =
            self.modules.keys().map(|m| (m, 0)).collect();
        for e in self.edges.values() {
            *indegree.entry(&e.child).or_insert(0) += 1;
        }
        let mut ready: Vec<&ModuleId> =
            indegree.iter().filter(|(_, d)| **d == 0).map(|(m, _)| *m).collect();
        let mut visited = 0;
        while let Some(m) = ready.pop() {
            visited += 1;
            for s in 1..=CHILD_SLOTS {
                if let Some(e) = self.edges.get(&m.slot(s)) {
                    let d = indegree.get_mut(&e.child).expect("edge child is a module");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(&e.child);
                    }
                }
            }
        }
        visited == indegree.len()
    }

    /// Connects `child`'s root node to leaf slot `slot` of `parent`.
    pub fn attach(
        &mut self,
        parent: &ModuleId,
        slot: u8,
        child: &ModuleId,
    ) -> Result<[PlugEvent; 2], TopologyError> {
        if slot == 0 || slot > CHILD_SLOTS {
            return Err(TopologyError::InvalidSlot(format!("{parent}.{slot}")));
        }
        for m in [parent, child] {
            if !self.modules.contains_key(m) {
                return Err(TopologyError::UnknownModule(m.clone()));
            }
        }
        let slot_ref = parent.slot(slot);
        if self.edges.contains_key(&slot_ref) {
            return Err(TopologyError::SlotOccupied(slot_ref));
        }
        if self.descendants(child).contains(parent) {
            return Err(TopologyError::Cycle { parent: parent.clone(), child: child.clone() });
        }
        let used: BTreeSet<u8> = self.parents_of(child).into_iter().map(|(p, _)| p).collect();
        let plug = (1..=PARENT_PLUGS)
            .find(|p| !used.contains(p))
            .ok_or_else(|| TopologyError::NoFreePlug(child.clone()))?;
        self.edges.insert(slot_ref.clone(), Edge { child: child.clone(), plug });
        debug_assert!(self.is_acyclic());
        Ok(wire_events(PlugAction::Plug, slot_ref, child.clone(), plug))
    }

    /// Disconnects whatever hangs below `parent`'s leaf slot.
    pub fn detach(
        &mut self,
        parent: &ModuleId,
        slot: u8,
    ) -> Result<(ModuleId, [PlugEvent; 2]), TopologyError> {
        if !self.modules.contains_key(parent) {
            return Err(TopologyError::UnknownModule(parent.clone()));
        }
        if slot == 0 || slot > CHILD_SLOTS {
            return Err(TopologyError::InvalidSlot(format!("{parent}.{slot}")));
        }
        let slot_ref = parent.slot(slot);
        let edge = self.edges.remove(&slot_ref).ok_or(TopologyError::SlotEmpty(slot_ref.clone()))?;
        let events = wire_events(PlugAction::Unplug, slot_ref, edge.child.clone(), edge.plug);
        Ok((edge.child, events))
    }

    /// Serializes modules and connections as a line-oriented document.
    ///
    /// ```text
    /// module RPN1 level=0
    /// module RPN2 level=1
    /// RPN1.1 -> RPN2
    /// ```
    pub fn registry_export(&self) -> String {
        let mut out = String::new();
        for m in self.modules.values() {
            out.push_str(&format!("module {} level={}\n", m.id, m.level));
        }
        for (slot, edge) in &self.edges {
            out.push_str(&format!("{} -> {}\n", slot, edge.child));
        }
        out
    }

    /// Parses a registry document. Module lines are optional; modules named
    /// only in edges get level 0. Lines may appear in any order and `#`
    /// starts a comment.
    pub fn registry_import(doc: &str) -> Result<Self, RegistryError> {
        let mut graph = TopologyGraph::new();
        let mut edges: Vec<(usize, SlotRef, ModuleId)> = Vec::new();
        let err = |line: usize, message: String| RegistryError { line, message };

        for (idx, raw) in doc.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("module ") {
                let mut parts = rest.split_whitespace();
                let id = parts.next().ok_or_else(|| err(line_no, "missing module id".into()))?;
                let id = ModuleId::new(id).map_err(|e| err(line_no, e.to_string()))?;
                let mut level = 0u8;
                for attr in parts {
                    match attr.split_once('=') {
                        Some(("level", v)) => {
                            level = v
                                .parse()
                                .map_err(|_| err(line_no, format!("bad level `{v}`")))?;
                        }
                        _ => return Err(err(line_no, format!("unknown attribute `{attr}`"))),
                    }
                }
                graph
                    .add_module(ModuleDescriptor::new(id, level))
                    .map_err(|e| err(line_no, e.to_string()))?;
            } else if let Some((lhs, rhs)) = line.split_once("->") {
                let slot =
                    SlotRef::parse_registry(lhs.trim()).map_err(|e| err(line_no, e.to_string()))?;
                let child = ModuleId::new(rhs.trim()).map_err(|e| err(line_no, e.to_string()))?;
                edges.push((line_no, slot, child));
            } else {
                return Err(err(line_no, format!("unrecognized line `{line}`")));
            }
        }
        for (_, slot, child) in &edges {
            for m in [&slot.module, child] {
                if !graph.contains(m) {
                    graph.modules.insert(m.clone(), ModuleDescriptor::new(m.clone(), 0));
                }
            }
        }
        edges.sort_by(|a, b| a.1.cmp(&b.1));
        for (line_no, slot, child) in edges {
            graph
                .attach(&slot.module, slot.slot, &child)
                .map_err(|e| err(line_no, e.to_string()))?;
        }
        Ok(graph)
    }
}

fn wire_events(action: PlugAction, parent: SlotRef, child: ModuleId, plug: u8) -> [PlugEvent; 2] {
    [
        PlugEvent { action, direction: WireDirection::Down, parent: parent.clone(), child: child.clone(), plug },
        PlugEvent { action, direction: WireDirection::Up, parent, child, plug },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ModuleId {
        ModuleId::new(s).unwrap()
    }

    fn five_modules() -> TopologyGraph {
        let mut g = TopologyGraph::new();
        for (m, level) in [("RPN1", 0), ("RPN2", 1), ("RPN3", 1), ("RPN4", 2), ("RPN5", 2)] {
            g.add_module(ModuleDescriptor::new(id(m), level)).unwrap();
        }
        g
    }

    #[test]
    fn attach_and_reject() {
        let mut g = five_modules();
        let events = g.attach(&id("RPN1"), 1, &id("RPN2")).unwrap();
        assert_eq!(events[0].direction, WireDirection::Down);
        assert_eq!(events[1].direction, WireDirection::Up);
        assert_eq!(events[0].plug, 1);
        assert_eq!(g.attach(&id("RPN3"), 1, &id("RPN3")).unwrap_err().code(), "cycle");
        assert_eq!(g.attach(&id("RPN1"), 1, &id("RPN3")).unwrap_err().code(), "slot_occupied");
        assert_eq!(g.attach(&id("RPN2"), 1, &id("RPN1")).unwrap_err().code(), "cycle");
        assert_eq!(g.attach(&id("RPN9"), 1, &id("RPN3")).unwrap_err().code(), "unknown_module");
        assert_eq!(g.attach(&id("RPN1"), 3, &id("RPN3")).unwrap_err().code(), "invalid_slot");
        assert!(g.is_acyclic());
    }

    #[test]
    fn plug_limit_is_three() {
        let mut g = TopologyGraph::new();
        for m in ["A", "B", "C", "X"] {
            g.add_module(ModuleDescriptor::new(id(m), 0)).unwrap();
        }
        g.attach(&id("A"), 1, &id("X")).unwrap();
        g.attach(&id("A"), 2, &id("X")).unwrap();
        let e = g.attach(&id("B"), 1, &id("X")).unwrap();
        assert_eq!(e[0].plug, 3);
        assert_eq!(g.attach(&id("C"), 1, &id("X")).unwrap_err().code(), "no_free_plug");
        assert_eq!(g.parents_of(&id("X")).len(), 3);
    }

    #[test]
    fn detach_rules() {
        let mut g = five_modules();
        g.attach(&id("RPN1"), 1, &id("RPN2")).unwrap();
        let (child, events) = g.detach(&id("RPN1"), 1).unwrap();
        assert_eq!(child, id("RPN2"));
        assert!(events.iter().all(|e| e.action == PlugAction::Unplug));
        assert_eq!(g.detach(&id("RPN1"), 1).unwrap_err().code(), "slot_empty");
        assert_eq!(g.roots().len(), 5);
    }

    #[test]
    fn growth_graph_registry() {
        let mut g = five_modules();
        g.attach(&id("RPN1"), 1, &id("RPN2")).unwrap();
        g.attach(&id("RPN2"), 2, &id("RPN5")).unwrap();
        g.attach(&id("RPN2"), 1, &id("RPN4")).unwrap();
        let doc = g.registry_export();
        for line in ["RPN1.1 -> RPN2", "RPN2.2 -> RPN5", "RPN2.1 -> RPN4"] {
            assert!(doc.lines().any(|l| l == line), "{doc}");
        }
        assert_eq!(TopologyGraph::registry_import(&doc).unwrap(), g);
        let free: Vec<String> = g.free_slots().iter().map(|s| s.leaf_id()).collect();
        assert_eq!(free, ["RPN1-2", "RPN3-1", "RPN3-2", "RPN4-1", "RPN4-2", "RPN5-1", "RPN5-2"]);
    }

    #[test]
    fn registry_edges_only_and_order_insensitive() {
        let g = TopologyGraph::registry_import("# wiring\nRPN2.2 -> RPN5\n\nRPN1.1 -> RPN2\n").unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.roots(), [id("RPN1")]);
        assert_eq!(TopologyGraph::new().registry_export(), "");
        assert_eq!(TopologyGraph::registry_import("").unwrap(), TopologyGraph::new());
    }

    #[test]
    fn registry_errors_carry_line() {
        let e = TopologyGraph::registry_import("RPN1.1 -> RPN2\nRPN1.1 -> RPN3\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = TopologyGraph::registry_import("RPN1.1 -> RPN2\nRPN2.1 -> RPN1\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = TopologyGraph::registry_import("module A\nnonsense here\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = TopologyGraph::registry_import("RPN1.7 -> RPN2").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn leaf_ids() {
        let s = SlotRef::parse_leaf("RPN5-1").unwrap();
        assert_eq!(s, id("RPN5").slot(1));
        assert_eq!(s.leaf_id(), "RPN5-1");
        assert_eq!(s.to_string(), "RPN5.1");
        assert!(SlotRef::parse_leaf("RPN5").is_err());
        assert!(ModuleId::new("a b").is_err());
    }
}
