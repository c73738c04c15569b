use std::collections::BTreeMap;

use vmc_sim::live::run_real_time;
use vmc_sim::snapshot::SnapshotStore;
use vmc_sim::telemetry::read_csv;
use vmc_sim::{run_fast_forward, Command, RunOptions, Scenario, Simulation, TelemetryRecord};

const CHAIN: &str = r#"
    name = "chain"
    [runtime]
    duration = 300.0
    [channel]
    ideal = true
    [scene]
    ambient = 0.6
    [[modules]]
    id = "RPN1"
    [[modules]]
    id = "RPN2"
    level = 1
    [[attachments]]
    parent = "RPN1.1"
    child = "RPN2"
"#;

fn run_collect(sim: &mut Simulation, until_s: f64) -> Vec<(u64, TelemetryRecord)> {
    let mut out = Vec::new();
    sim.run_until((until_s * 1e6) as u64, |sim, it| out.push((sim.now_us(), it.record.clone())));
    out
}

fn slot_sum(r: &TelemetryRecord) -> f64 {
    r.slots.iter().map(|s| s.r).sum()
}

#[test]
fn ideal_cables_carry_the_last_transmitted_value() {
    let mut sim = Simulation::new(Scenario::parse(CHAIN).unwrap(), None).unwrap().without_jitter();
    let recs = run_collect(&mut sim, 100.0);
    let mut last_slot1 = None;
    let mut checked = 0;
    for (_, r) in &recs {
        match r.module.as_str() {
            "RPN1" => {
                assert!((slot_sum(r) - r.r_gen).abs() < 1e-12, "root conserves: {r:?}");
                last_slot1 = Some(r.slots[0].r);
            }
            _ => {
                if let Some(sent) = last_slot1 {
                    assert_eq!(r.r_in, sent);
                    assert!((slot_sum(r) - r.r_in).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 80);
}

#[test]
fn detached_modules_settle_to_the_isolated_split() {
    let text = format!("{CHAIN}\n[[events]]\nat = 100.0\nop = \"detach\"\nparent = \"RPN1.1\"\n");
    let mut sim = Simulation::new(Scenario::parse(&text).unwrap(), None).unwrap().without_jitter();
    let recs = run_collect(&mut sim, 300.0);
    // Before the detach RPN1 favours the slot relaying two leaves.
    let before = recs.iter().rev().find(|(t, r)| *t < 100_000_000 && r.module == "RPN1").unwrap();
    assert!(before.1.slots[0].r > before.1.slots[1].r);
    // Uniform light and no tilt: every isolated module splits evenly.
    for m in ["RPN1", "RPN2"] {
        let (_, last) = recs.iter().rev().find(|(_, r)| r.module == m).unwrap();
        assert_eq!(last.r_gen, 1.0);
        assert_eq!(last.r_in, 0.0);
        assert!(last.parent_ids.is_empty() && last.child_ids.is_empty());
        for s in &last.slots {
            assert!(!s.live);
            assert!((s.r - 0.5).abs() < 1e-6, "{m}: {}", s.r);
        }
    }
}

#[test]
fn killed_module_resumes_from_its_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let store = SnapshotStore::open(dir.path()).unwrap();
    let mut sim = Simulation::new(Scenario::parse(CHAIN).unwrap(), Some(store.clone())).unwrap();
    let before = run_collect(&mut sim, 100.0);
    let last = before.iter().rev().find(|(_, r)| r.module == "RPN2").unwrap().1.clone();
    sim.apply(&Command::Kill { module: "RPN2".into() }).unwrap();
    let dead = run_collect(&mut sim, 130.0);
    assert!(dead.iter().all(|(_, r)| r.module == "RPN1"));
    // With RPN2 gone RPN1 sees a free leaf where the relay was.
    let (_, late) = dead.last().unwrap();
    assert!(!late.slots[0].live);
    assert!(late.child_ids == ["1:RPN2"], "the registry still lists the edge");

    sim.apply(&Command::Restart { module: "RPN2".into() }).unwrap();
    let after = run_collect(&mut sim, 140.0);
    let first = after.iter().find(|(_, r)| r.module == "RPN2").unwrap().1.clone();
    assert_eq!(first.iter, last.iter + 1);
    for k in 0..2 {
        // A cold start would begin from V = 0.01.
        let (v, was) = (first.slots[k].v, last.slots[k].v);
        assert!((v - was).abs() < (was - 0.01).abs() / 4.0, "vessel {k}: {was} -> {v}");
    }
}

#[test]
fn module_schedules_are_independent_across_seeds() {
    let mut first_offsets = Vec::new();
    for seed in 1..=10u64 {
        let s = Scenario::parse(CHAIN).unwrap().with_seed(seed);
        let mut sim = Simulation::new(s, None).unwrap();
        let recs = run_collect(&mut sim, 120.0);
        let mut times: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for (t, r) in &recs {
            times.entry(r.module.as_str()).or_default().push(*t);
        }
        let (a, b) = (&times["RPN1"], &times["RPN2"]);
        for ts in [a, b] {
            for w in ts.windows(2) {
                assert!((800_000..=1_200_000).contains(&(w[1] - w[0])), "seed {seed}: wait {}", w[1] - w[0]);
            }
        }
        // Iteration counts drift apart and phases wander: no lockstep.
        let n = a.len().min(b.len());
        let offsets: Vec<i64> = (0..n).map(|i| a[i] as i64 - b[i] as i64).collect();
        let distinct: std::collections::BTreeSet<i64> = offsets.iter().copied().collect();
        assert!(distinct.len() > n / 2, "seed {seed}: offsets too regular");
        first_offsets.push(offsets[0]);
    }
    let distinct: std::collections::BTreeSet<i64> = first_offsets.iter().copied().collect();
    assert_eq!(distinct.len(), 10, "every seed gives its own schedule");
}

#[test]
fn fast_forward_runs_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::parse(CHAIN).unwrap();
    let opts = RunOptions { out_dir: Some(dir.path().into()), snapshot_dir: None, duration: Some(30.0) };
    let out = run_fast_forward(&s, &opts).unwrap();
    let csv = read_csv(&dir.path().join("telemetry.csv")).unwrap();
    assert_eq!(csv, out.records);
    let rpn2 = read_csv(&dir.path().join("modules/RPN2.csv")).unwrap();
    assert!(rpn2.iter().all(|r| r.module == "RPN2"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("registry.txt")).unwrap(),
        "module RPN1 level=0\nmodule RPN2 level=1\nRPN1.1 -> RPN2\n"
    );
    assert!(dir.path().join("snapshots/RPN1.toml").exists());
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn real_time_run_smoke() {
    let text = r#"
        name = "solo"
        [runtime]
        mode = "real_time"
        time_scale = 60.0
        duration = 90.0
        [scene]
        ambient = 0.6
        [[modules]]
        id = "RPN1"
        [[checks]]
        name = "even split"
        from = 30.0
        to = 90.0
        kind = "share_near"
        leaf = "RPN1-1"
        target = 0.5
        tolerance = 0.05
    "#;
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::parse(text).unwrap();
    let opts = RunOptions { out_dir: Some(dir.path().into()), ..RunOptions::default() };
    let start = std::time::Instant::now();
    let out = run_real_time(&s, &opts, None).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert!(out.report.passed, "{}", out.report.to_text());
    assert!(out.records.len() >= 70, "{} iterations", out.records.len());
    assert_eq!(read_csv(&dir.path().join("telemetry.csv")).unwrap().len(), out.records.len());
    assert!(dir.path().join("registry.txt").exists());
}
