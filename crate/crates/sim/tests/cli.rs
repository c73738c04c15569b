use std::io::Write;
use std::process::{Command, Stdio};

use vmc_sim::telemetry::read_csv;
use vmc_sim::TelemetryRecord;

fn vmc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vmc"))
}

#[test]
fn validate_builtin_and_bad_scenarios() {
    let out = vmc().args(["validate", "growth"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("growth: ok (4 modules"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"bad\"\n[[modules]]\nid = \"RPN1\"\n[[events]]\nat = 5.0\nop = \"kill\"\nmodule = \"RPN7\"\n")
        .unwrap();
    let out = vmc().args(["validate", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RPN7"));
}

#[test]
fn run_advise_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("char");
    let out = vmc()
        .args(["run", "characterization", "--fast-forward", "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("10/10 checks passed"), "{stdout}");
    let csv = out_dir.join("telemetry.csv");
    let records = read_csv(&csv).unwrap();
    assert_eq!(records.len(), 3000);

    let advice = vmc().args(["advise", csv.to_str().unwrap()]).output().unwrap();
    let lines: Vec<String> = String::from_utf8_lossy(&advice.stdout).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l.starts_with("RPN1-") && l.ends_with('%')));

    let replay = vmc().args(["replay", csv.to_str().unwrap()]).output().unwrap();
    let replayed: Vec<TelemetryRecord> = String::from_utf8_lossy(&replay.stdout)
        .lines()
        .map(|l| TelemetryRecord::from_json_line(l).unwrap())
        .collect();
    assert_eq!(replayed, records);
}

#[test]
fn network_flags_need_real_time() {
    let out = vmc()
        .args(["run", "growth", "--fast-forward", "--publish", "127.0.0.1:0", "--out", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn send_prints_acks() {
    use std::sync::Arc;
    use vmc_sim::net::{CommandServer, Handler};
    let handler: Handler = Arc::new(|c| match c {
        vmc_sim::Command::Pause => Ok(()),
        other => Err(vmc_sim::Rejection::new("unsupported", other.name())),
    });
    let server = CommandServer::spawn("127.0.0.1:0", handler).unwrap();
    let mut child = vmc()
        .args(["send", &server.local_addr().to_string()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"{\"id\":1,\"op\":\"pause\"}\n{\"id\":2,\"op\":\"resume\"}\n").unwrap();
    let out = child.wait_with_output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], r#"{"id":1,"ok":true,"op":"pause"}"#);
    assert!(lines[1].contains(r#""code":"unsupported""#));
    assert_eq!(out.status.code(), Some(1));
}
