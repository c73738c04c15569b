use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::rngs::SmallRng;
use rand::SeedableRng;
use vmc_core::channel::{encode, LineLevel, ReceiverConfig, ReceiverEndpoint};
use vmc_core::environment::{layout, Lamp, LayoutParams, Scene, SceneEvent};
use vmc_core::topology::{ModuleDescriptor, ModuleId, SlotRef, TopologyGraph};
use vmc_core::vmc::{
    distribute_resource, node_step, produce_successin, split_successin_to_parents,
    transfer_successin, update_vessel, NodeParams, NodeVmcState, SensorFrame, SlotInput,
    StepInput,
};
use vmc_core::Genome;

const G: Genome = Genome::BRAID;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #[test]
    fn distribution_conserves_resource(r in 0.0f64..10.0, vessels in prop::collection::vec(0.0f64..5.0, 1..6)) {
        let out = distribute_resource(r, &vessels);
        let sum: f64 = out.iter().sum();
        prop_assert_eq!(out.len(), vessels.len());
        if r > 0.0 {
            prop_assert!(rel_err(sum, r) < 1e-12);
        } else {
            prop_assert!(out.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn distribution_is_scale_invariant(r in 0.01f64..10.0, vessels in prop::collection::vec(0.001f64..5.0, 1..6), c in 0.01f64..100.0) {
        let a = distribute_resource(r, &vessels);
        let scaled: Vec<f64> = vessels.iter().map(|v| v * c).collect();
        let b = distribute_resource(r, &scaled);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * r);
        }
    }

    #[test]
    fn split_conserves_successin(s in 0.0f64..=1.0, rs in prop::collection::vec(0.0f64..2.0, 1..4)) {
        let out = split_successin_to_parents(s, &rs);
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - s).abs() <= 1e-12 * s.max(1e-300) || (s == 0.0 && sum == 0.0));
    }

    #[test]
    fn vessel_update_increasing_in_successin(v in 0.0f64..2.0, s1 in 0.0f64..1.0, ds in 1e-6f64..0.5) {
        let s2 = (s1 + ds).min(1.0);
        prop_assume!(s2 > s1);
        prop_assert!(update_vessel(v, s2, &G) > update_vessel(v, s1, &G));
    }

    #[test]
    fn vessel_contracts_with_ratio_alpha(v0 in 0.0f64..2.0, s in 0.0f64..1.0) {
        let target = s.powf(G.beta);
        let v1 = update_vessel(v0, s, &G);
        if (v0 - target).abs() > 1e-9 {
            prop_assert!(((v1 - target) / (v0 - target) - G.alpha).abs() < 1e-6);
        }
    }

    #[test]
    fn steady_vessels_amplify_successin_ratio(sa in 0.05f64..1.0, ratio in 1.01f64..4.0) {
        let sb = sa / ratio;
        let (mut va, mut vb) = (0.01, 0.01);
        for _ in 0..400 {
            va = update_vessel(va, sa, &G);
            vb = update_vessel(vb, sb, &G);
        }
        prop_assert!(rel_err(va / vb, ratio.powf(G.beta)) < 1e-9);
    }

    #[test]
    fn produce_and_transfer_stay_in_unit_interval(l in 0.0f64..=1.0, u in 0.0f64..=1.0, kids in prop::collection::vec(0.0f64..=1.0, 1..4)) {
        let f = SensorFrame::new(l, u);
        let p = produce_successin(f, &G);
        let t = transfer_successin(&kids, f, &G).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0).contains(&t));
    }

    #[test]
    fn ideal_channel_round_trip_is_exact(v in 0.0f64..=1.0, t in 0u64..1_000_000) {
        let mut rx = ReceiverEndpoint::new(ReceiverConfig::ideal(), SmallRng::seed_from_u64(0));
        rx.drive(t, LineLevel::Driven(v));
        let r = rx.read(t).unwrap();
        prop_assert!(r.live);
        prop_assert_eq!(r.value, Some(v));
        prop_assert!((encode(v).unwrap().duty_cycle - r.mean).abs() < 1e-15);
    }

    #[test]
    fn attached_sender_always_live(v in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut rx = ReceiverEndpoint::new(ReceiverConfig::default(), SmallRng::seed_from_u64(seed));
        rx.drive(0, LineLevel::Driven(v));
        let r = rx.read(6_000_000).unwrap();
        prop_assert!(r.live);
        prop_assert!(rx.queue().len() <= rx.queue().capacity());
    }

    #[test]
    fn random_topology_ops_keep_graph_acyclic(ops in prop::collection::vec((0usize..8, 1u8..=2, 0usize..8, any::<bool>()), 0..60)) {
        let ids: Vec<ModuleId> = (0..8).map(|i| ModuleId::new(format!("M{i}")).unwrap()).collect();
        let mut g = TopologyGraph::new();
        for id in &ids {
            g.add_module(ModuleDescriptor::new(id.clone(), 0)).unwrap();
        }
        let mut plugs = 0i64;
        for (p, slot, c, attach) in ops {
            if attach {
                if let Ok(ev) = g.attach(&ids[p], slot, &ids[c]) {
                    plugs += ev.len() as i64;
                }
            } else if let Ok((_, ev)) = g.detach(&ids[p], slot) {
                plugs -= ev.len() as i64;
            }
            prop_assert!(g.is_acyclic());
        }
        // every live edge accounts for exactly two plugged wires
        prop_assert_eq!(plugs, 2 * g.edge_count() as i64);
        let back = TopologyGraph::registry_import(&g.registry_export()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn lamp_intensity_is_monotone(i1 in 0.0f64..2.0, di in 0.0f64..2.0, x in -2.0f64..2.0) {
        let g = single_module();
        let poses = layout(&g, &LayoutParams::default());
        let scene_at = |i: f64| Scene::default().apply(&SceneEvent::AddLamp {
            name: "l".into(),
            lamp: Lamp { position: [x, 0.5, 1.0], intensity: i, spread: None },
        }).unwrap();
        let (a, b) = (scene_at(i1), scene_at(i1 + di));
        for (slot, pose) in &poses {
            let leaf = slot.leaf_id();
            prop_assert!(b.light_at(pose.position, &leaf) >= a.light_at(pose.position, &leaf));
        }
    }

    #[test]
    fn shade_is_local(att in 0.0f64..=1.0) {
        let g = single_module();
        let poses = layout(&g, &LayoutParams::default());
        let lit = Scene { ambient: 0.1, ..Scene::default() }.apply(&SceneEvent::AddLamp {
            name: "l".into(),
            lamp: Lamp { position: [0.0, 0.5, 1.0], intensity: 1.0, spread: None },
        }).unwrap();
        let shaded = lit.apply(&SceneEvent::AddShade { leaf: "RPN1-2".into(), attenuation: att }).unwrap();
        let left = SlotRef::parse_leaf("RPN1-1").unwrap();
        let p = poses[&left].position;
        prop_assert_eq!(lit.light_at(p, "RPN1-1"), shaded.light_at(p, "RPN1-1"));
    }
}

fn single_module() -> TopologyGraph {
    let mut g = TopologyGraph::new();
    g.add_module(ModuleDescriptor::new(ModuleId::new("RPN1").unwrap(), 0)).unwrap();
    g
}

/// Steady-state leaf resource computed centrally: successin bottom-up,
/// vessels at their fixed point `S^beta`, resource top-down.
fn central_flow(
    graph: &TopologyGraph,
    root: &ModuleId,
    frames: &BTreeMap<SlotRef, SensorFrame>,
    params: &NodeParams,
) -> BTreeMap<SlotRef, f64> {
    fn successin(
        g: &TopologyGraph,
        m: &ModuleId,
        frames: &BTreeMap<SlotRef, SensorFrame>,
        p: &NodeParams,
    ) -> Vec<f64> {
        (1..=2)
            .map(|k| {
                let slot = m.slot(k);
                let f = frames[&slot];
                match g.child_at(&slot) {
                    Some(e) => {
                        let child: f64 = successin(g, &e.child, frames, p).iter().sum::<f64>().min(1.0);
                        ((p.genome.rho_c + p.genome.rho_phi * f.uprightness + p.genome.rho_lambda * f.light) * child).min(1.0)
                    }
                    None => {
                        (p.genome.omega_c + p.genome.omega_phi * f.uprightness + p.genome.omega_lambda * f.light).min(1.0)
                            * p.leaf_cap
                    }
                }
            })
            .collect()
    }
    let mut out = BTreeMap::new();
    let mut stack = vec![(root.clone(), 1.0)];
    while let Some((m, r)) = stack.pop() {
        let s = successin(graph, &m, frames, params);
        let v: Vec<f64> = s.iter().map(|x| x.powf(params.genome.beta)).collect();
        let total: f64 = v.iter().sum();
        for k in 1..=2u8 {
            let share = r * v[k as usize - 1] / total;
            let slot = m.slot(k);
            out.insert(slot.clone(), share);
            if let Some(e) = graph.child_at(&slot) {
                stack.push((e.child.clone(), share));
            }
        }
    }
    out
}

/// Runs `node_step` on every module with exact wires until it settles.
fn distributed_flow(
    graph: &TopologyGraph,
    frames: &BTreeMap<SlotRef, SensorFrame>,
    params: &NodeParams,
    iterations: usize,
) -> BTreeMap<SlotRef, f64> {
    let mut states: BTreeMap<ModuleId, NodeVmcState> =
        graph.modules().map(|m| (m.id.clone(), NodeVmcState::cold_start(2))).collect();
    let mut down: BTreeMap<ModuleId, f64> = BTreeMap::new();
    let mut up: BTreeMap<SlotRef, f64> = BTreeMap::new();
    let mut slot_r = BTreeMap::new();
    for _ in 0..iterations {
        let mut next_down = BTreeMap::new();
        let mut next_up = BTreeMap::new();
        for m in graph.modules() {
            let id = &m.id;
            let parents = graph.parents_of(id);
            let parent_r: Vec<f64> = if parents.is_empty() { vec![] } else { vec![*down.get(id).unwrap_or(&0.0)] };
            let slots: Vec<SlotInput> = (1..=2)
                .map(|k| {
                    let slot = id.slot(k);
                    let sensors = frames[&slot];
                    match graph.child_at(&slot) {
                        Some(_) => SlotInput::Relay { successin: *up.get(&slot).unwrap_or(&0.0), sensors },
                        None => SlotInput::Free(sensors),
                    }
                })
                .collect();
            let out = node_step(&states[id], &StepInput { parent_resource: &parent_r, slots: &slots }, params).unwrap();
            for k in 1..=2u8 {
                let slot = id.slot(k);
                slot_r.insert(slot.clone(), out.slot_resource[k as usize - 1]);
                if let Some(e) = graph.child_at(&slot) {
                    next_down.insert(e.child.clone(), out.slot_resource[k as usize - 1]);
                }
            }
            if let Some((_, parent_slot)) = parents.first() {
                next_up.insert(parent_slot.clone(), out.parent_successin[0]);
            }
            states.insert(id.clone(), out.state);
        }
        down = next_down;
        up = next_up;
    }
    slot_r
}

#[test]
fn chain_converges_to_central_flow() {
    let ids: Vec<ModuleId> = ["RPN1", "RPN2", "RPN5"].iter().map(|s| ModuleId::new(*s).unwrap()).collect();
    let mut g = TopologyGraph::new();
    for (i, id) in ids.iter().enumerate() {
        g.add_module(ModuleDescriptor::new(id.clone(), i as u8)).unwrap();
    }
    g.attach(&ids[0], 1, &ids[1]).unwrap();
    g.attach(&ids[1], 2, &ids[2]).unwrap();
    let frames: BTreeMap<SlotRef, SensorFrame> = [
        ("RPN1-1", 0.5, 1.0),
        ("RPN1-2", 0.3, 1.0),
        ("RPN2-1", 0.7, 0.9),
        ("RPN2-2", 0.9, 1.0),
        ("RPN5-1", 0.8, 0.2),
        ("RPN5-2", 0.6, 0.1),
    ]
    .iter()
    .map(|(l, light, up)| (SlotRef::parse_leaf(l).unwrap(), SensorFrame::new(*light, *up)))
    .collect();
    let params = NodeParams::default();
    let central = central_flow(&g, &ids[0], &frames, &params);
    let distributed = distributed_flow(&g, &frames, &params, 600);
    for (slot, r) in &central {
        assert!((distributed[slot] - r).abs() < 1e-9, "{slot}: {} vs {r}", distributed[slot]);
    }
    // leaf resource is the product of vessel ratios along the path
    let leaves: f64 = g.free_slots().iter().map(|s| central[s]).sum();
    assert!((leaves - 1.0).abs() < 1e-12);
}

#[test]
fn random_trees_match_central_flow() {
    use rand::Rng;
    let mut rng = SmallRng::seed_from_u64(11);
    for _ in 0..25 {
        let n = rng.gen_range(1..=7);
        let ids: Vec<ModuleId> = (0..n).map(|i| ModuleId::new(format!("M{i}")).unwrap()).collect();
        let mut g = TopologyGraph::new();
        for id in &ids {
            g.add_module(ModuleDescriptor::new(id.clone(), 0)).unwrap();
        }
        for i in 1..n {
            loop {
                let p = rng.gen_range(0..i);
                if g.attach(&ids[p], rng.gen_range(1..=2), &ids[i]).is_ok() {
                    break;
                }
            }
        }
        let frames: BTreeMap<SlotRef, SensorFrame> = ids
            .iter()
            .flat_map(|m| [m.slot(1), m.slot(2)])
            .map(|s| (s, SensorFrame::new(rng.gen(), rng.gen())))
            .collect();
        let params = NodeParams::new(Genome::BRAID, 12);
        let central = central_flow(&g, &ids[0], &frames, &params);
        let distributed = distributed_flow(&g, &frames, &params, 800);
        for (slot, r) in &central {
            assert!((distributed[slot] - r).abs() < 1e-8, "{slot}: {} vs {r}", distributed[slot]);
        }
    }
}
