//! Scene description and leaf sensor synthesis.
//!
//! Leaves are placed by a simple layout: every module is a Y whose two arms
//! spread symmetrically around the module axis, and a child module grows
//! along the axis of the arm it is attached to. Light at a leaf is ambient
//! plus a softened inverse-square contribution of each lamp, reduced by any
//! shade on that leaf. Uprightness is the clamped cosine of the leaf's tilt.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::topology::{ModuleId, SlotRef, TopologyGraph, CHILD_SLOTS};
use crate::vmc::{clamp_unit, SensorFrame};

pub type Point = [f64; 3];

/// Photoresistors per leaf node; their readings are averaged.
pub const PHOTORESISTORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Lamp {
    pub position: Point,
    pub intensity: f64,
    /// Softening distance of the falloff in metres; the scene default when absent.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub spread: Option<f64>,
}

/// Geometry knobs of the leaf layout.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LayoutParams {
    /// Angle between each arm and the module axis, degrees.
    pub arm_spread_deg: f64,
    /// Arm length per module level in metres; deeper levels reuse the last entry.
    pub arm_length: Vec<f64>,
    /// Position of the first root module's base.
    pub base: Point,
    /// Offset between bases of further, unconnected root modules.
    pub root_spacing: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            arm_spread_deg: 26.0,
            arm_length: alloc::vec![0.9, 0.6, 0.4],
            base: [0.0, 0.0, 0.0],
            root_spacing: 2.0,
        }
    }
}

impl LayoutParams {
    fn arm_length(&self, level: u8) -> f64 {
        let idx = (level as usize).min(self.arm_length.len().saturating_sub(1));
        self.arm_length.get(idx).copied().unwrap_or(0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Scene {
    /// Ambient irradiance in `[0, 1]`.
    pub ambient: f64,
    pub lamps: BTreeMap<String, Lamp>,
    /// Shade attenuation per leaf id (`RPN1-2`), in `[0, 1]`.
    pub shades: BTreeMap<String, f64>,
    /// Tilt from vertical in degrees, keyed by module id (whole module) or
    /// leaf id (one arm). Both apply additively.
    pub tilts: BTreeMap<String, f64>,
    /// Default falloff softening distance in metres.
    pub falloff: f64,
    /// Standard deviation of per-reading sensor noise.
    pub jitter_sigma: f64,
    pub layout: LayoutParams,
}

impl Default for Scene {
    fn default() -> Self {
        Scene {
            ambient: 0.0,
            lamps: BTreeMap::new(),
            shades: BTreeMap::new(),
            tilts: BTreeMap::new(),
            falloff: 0.5,
            jitter_sigma: 0.01,
            layout: LayoutParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    UnknownLamp(String),
    DuplicateLamp(String),
    NoShade(String),
    OutOfRange { what: &'static str, value: f64 },
}

impl SceneError {
    pub fn code(&self) -> &'static str {
        match self {
            SceneError::UnknownLamp(_) | SceneError::NoShade(_) => "unknown_entity",
            SceneError::DuplicateLamp(_) => "duplicate_entity",
            SceneError::OutOfRange { .. } => "out_of_range",
        }
    }
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::UnknownLamp(n) => write!(f, "no lamp named `{n}`"),
            SceneError::DuplicateLamp(n) => write!(f, "lamp `{n}` already exists"),
            SceneError::NoShade(l) => write!(f, "no shade on leaf `{l}`"),
            SceneError::OutOfRange { what, value } => write!(f, "{what} out of range: {value}"),
        }
    }
}

impl core::error::Error for SceneError {}

/// A change to the scene.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "op", rename_all = "snake_case"))]
pub enum SceneEvent {
    SetAmbient { ambient: f64 },
    AddLamp { name: String, lamp: Lamp },
    MoveLamp { name: String, position: Point },
    SetLampIntensity { name: String, intensity: f64 },
    RemoveLamp { name: String },
    AddShade { leaf: String, attenuation: f64 },
    RemoveShade { leaf: String },
    SetTilt { branch: String, degrees: f64 },
}

impl SceneEvent {
    /// Branch or leaf id the event refers to, if any.
    pub fn target_branch(&self) -> Option<&str> {
        match self {
            SceneEvent::AddShade { leaf, .. } | SceneEvent::RemoveShade { leaf } => Some(leaf),
            SceneEvent::SetTilt { branch, .. } => Some(branch),
            _ => None,
        }
    }
}

fn check(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), SceneError> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(SceneError::OutOfRange { what, value })
    }
}

fn check_lamp(lamp: &Lamp) -> Result<(), SceneError> {
    check("lamp intensity", lamp.intensity, 0.0, f64::MAX)?;
    for c in lamp.position {
        check("lamp position", c, f64::MIN, f64::MAX)?;
    }
    if let Some(s) = lamp.spread {
        check("lamp spread", s, f64::MIN_POSITIVE, f64::MAX)?;
    }
    Ok(())
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        check("ambient", self.ambient, 0.0, 1.0)?;
        check("falloff", self.falloff, f64::MIN_POSITIVE, f64::MAX)?;
        check("jitter sigma", self.jitter_sigma, 0.0, 1.0)?;
        for lamp in self.lamps.values() {
            check_lamp(lamp)?;
        }
        for &a in self.shades.values() {
            check("shade attenuation", a, 0.0, 1.0)?;
        }
        for &t in self.tilts.values() {
            check("tilt angle", t, 0.0, 180.0)?;
        }
        Ok(())
    }

    /// Returns the scene with `event` applied, leaving `self` untouched.
    pub fn apply(&self, event: &SceneEvent) -> Result<Scene, SceneError> {
        let mut next = self.clone();
        match event {
            SceneEvent::SetAmbient { ambient } => {
                check("ambient", *ambient, 0.0, 1.0)?;
                next.ambient = *ambient;
            }
            SceneEvent::AddLamp { name, lamp } => {
                check_lamp(lamp)?;
                if next.lamps.insert(name.clone(), *lamp).is_some() {
                    return Err(SceneError::DuplicateLamp(name.clone()));
                }
            }
            SceneEvent::MoveLamp { name, position } => {
                let lamp =
                    next.lamps.get_mut(name).ok_or_else(|| SceneError::UnknownLamp(name.clone()))?;
                lamp.position = *position;
                check_lamp(lamp)?;
            }
            SceneEvent::SetLampIntensity { name, intensity } => {
                let lamp =
                    next.lamps.get_mut(name).ok_or_else(|| SceneError::UnknownLamp(name.clone()))?;
                lamp.intensity = *intensity;
                check_lamp(lamp)?;
            }
            SceneEvent::RemoveLamp { name } => {
                next.lamps.remove(name).ok_or_else(|| SceneError::UnknownLamp(name.clone()))?;
            }
            SceneEvent::AddShade { leaf, attenuation } => {
                check("shade attenuation", *attenuation, 0.0, 1.0)?;
                next.shades.insert(leaf.clone(), *attenuation);
            }
            SceneEvent::RemoveShade { leaf } => {
                next.shades.remove(leaf).ok_or_else(|| SceneError::NoShade(leaf.clone()))?;
            }
            SceneEvent::SetTilt { branch, degrees } => {
                check("tilt angle", *degrees, 0.0, 180.0)?;
                next.tilts.insert(branch.clone(), *degrees);
            }
        }
        Ok(next)
    }

    /// Effective tilt of a leaf in degrees, capped at 180.
    pub fn tilt_of(&self, leaf: &SlotRef) -> f64 {
        let own = self.tilts.get(&leaf.leaf_id()).copied().unwrap_or(0.0);
        let module = self.tilts.get(leaf.module.as_str()).copied().unwrap_or(0.0);
        (own + module).min(180.0)
    }

    /// Noise-free irradiance at a leaf.
    pub fn light_at(&self, position: Point, leaf_id: &str) -> f64 {
        let pass = 1.0 - self.shades.get(leaf_id).copied().unwrap_or(0.0);
        let lamps: f64 = self
            .lamps
            .values()
            .map(|lamp| {
                let d2 = dist2(position, lamp.position);
                let s = lamp.spread.unwrap_or(self.falloff);
                lamp.intensity / (1.0 + d2 / (s * s))
            })
            .sum();
        clamp_unit(self.ambient + lamps * pass)
    }
}

/// Maps a tilt from vertical to `max(0, cos(tilt))`.
pub fn uprightness(tilt_deg: f64) -> f64 {
    libm::cos(tilt_deg.to_radians()).max(0.0)
}

fn dist2(a: Point, b: Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafPose {
    pub position: Point,
    /// Unit vector along the arm.
    pub orientation: Point,
}

impl LeafPose {
    pub fn is_valid(&self) -> bool {
        let n2: f64 = self.orientation.iter().map(|c| c * c).sum();
        (n2 - 1.0).abs() < 1e-9 && self.position.iter().all(|c| c.is_finite())
    }
}

/// Rotates `axis` in the x-z plane; positive angles lean toward +x.
fn lean(axis: Point, angle: f64) -> Point {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    [axis[0] * c + axis[2] * s, axis[1], -axis[0] * s + axis[2] * c]
}

/// Places every leaf slot of the graph. Slot 1 leans left (-x), slot 2 right.
pub fn layout(graph: &TopologyGraph, params: &LayoutParams) -> BTreeMap<SlotRef, LeafPose> {
    let mut poses = BTreeMap::new();
    let spread = params.arm_spread_deg.to_radians();
    let mut stack: Vec<(ModuleId, Point, Point)> = Vec::new();
    for (k, root) in graph.roots().into_iter().enumerate().rev() {
        let base = params.base;
        let offset = [base[0] + params.root_spacing * k as f64, base[1], base[2]];
        stack.push((root, offset, [0.0, 0.0, 1.0]));
    }
    while let Some((module, base, axis)) = stack.pop() {
        if poses.contains_key(&module.slot(1)) {
            continue;
        }
        let level = graph.module(&module).map(|m| m.level).unwrap_or(0);
        let len = params.arm_length(level);
        let mut children = Vec::new();
        for slot in 1..=CHILD_SLOTS {
            let sign = if slot == 1 { -1.0 } else { 1.0 };
            let dir = lean(axis, sign * spread);
            let position = [base[0] + len * dir[0], base[1] + len * dir[1], base[2] + len * dir[2]];
            let slot_ref = module.slot(slot);
            if let Some(edge) = graph.child_at(&slot_ref) {
                children.push((edge.child.clone(), position, dir));
            }
            poses.insert(slot_ref, LeafPose { position, orientation: dir });
        }
        for c in children.into_iter().rev() {
            stack.push(c);
        }
    }
    poses
}

/// Synthesizes the sensor frame of one leaf.
///
/// With `rng = None` the result is a pure function of scene and pose.
pub fn sample_sensors<R: Rng + ?Sized>(
    scene: &Scene,
    pose: &LeafPose,
    leaf: &SlotRef,
    rng: Option<&mut R>,
) -> SensorFrame {
    let light = scene.light_at(pose.position, &leaf.leaf_id());
    let upright = uprightness(scene.tilt_of(leaf));
    match rng {
        Some(rng) if scene.jitter_sigma > 0.0 => {
            let noise = Normal::new(0.0, scene.jitter_sigma).expect("validated sigma");
            let light = (0..PHOTORESISTORS)
                .map(|_| clamp_unit(light + noise.sample(rng)))
                .sum::<f64>()
                / PHOTORESISTORS as f64;
            SensorFrame::new(light, upright + noise.sample(rng))
        }
        _ => SensorFrame::new(light, upright),
    }
}

/// Whether a tilt or shade key names a module (`RPN5`) or a leaf (`RPN5-1`) of `graph`.
pub fn branch_exists(graph: &TopologyGraph, branch: &str) -> bool {
    if let Ok(id) = ModuleId::new(branch.to_string()) {
        if graph.contains(&id) {
            return true;
        }
    }
    SlotRef::parse_leaf(branch).map(|s| graph.contains(&s.module)).unwrap_or(false)
}
