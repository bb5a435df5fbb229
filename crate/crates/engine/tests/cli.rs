use std::path::Path;
use std::process::{Command, Output};

fn vdr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdr")).current_dir(dir).args(args).output().expect("run vdr")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_sim_pipeline_round_trips_through_validate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("vdr.toml"),
        "seed = 3\n[world]\nn_images = 40\n[sim]\nnoise = 0.3\n[rl]\ngroup_size = 4\n",
    )
    .unwrap();
    let cfg = ["--config", "vdr.toml"];
    let run = |args: &[&str]| vdr(d, &[&cfg[..], args].concat());

    ok(&run(&["synth-vqa", "--out", "data.jsonl", "--depth", "2", "--audit", "vqa_audit.jsonl"]));
    let data = std::fs::read_to_string(d.join("data.jsonl")).unwrap();
    assert!(data.lines().count() > 10);
    for line in data.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let inst = &rec["instance"];
        if inst["source"] == "fuzzy_synth" {
            let kinds: Vec<&str> = inst["provenance"].as_array().unwrap().iter().map(|p| p["kind"].as_str().unwrap()).collect();
            assert_eq!(kinds, ["answer_chain", "entity_walk"]);
        }
    }

    ok(&run(&["synth-traj", "--dataset", "data.jsonl", "--out", "sft.jsonl", "--audit", "sft_audit.jsonl"]));
    let v = run(&["validate", "sft.jsonl"]);
    ok(&v);
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("ok:"));

    ok(&run(&[
        "rollout", "--tasks", "data.jsonl", "--split", "rl", "--samples", "4", "--out", "rl_trajs.jsonl", "--metrics",
        "metrics.jsonl",
    ]));
    let metrics = std::fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    let trajs = std::fs::read_to_string(d.join("rl_trajs.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), trajs.lines().count());
    assert_eq!(trajs.lines().count() % 4, 0);

    ok(&run(&["rl-prep", "--trajectories", "rl_trajs.jsonl", "--out", "batch.jsonl"]));
    let v = run(&["validate", "batch.jsonl"]);
    ok(&v);

    let again = run(&["synth-vqa", "--out", "data2.jsonl", "--depth", "2"]);
    ok(&again);
    assert_eq!(data, std::fs::read_to_string(d.join("data2.jsonl")).unwrap());
}

#[test]
fn validate_reports_corrupt_lines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"not\": \"a trajectory\"}\nnonsense\n").unwrap();
    let out = vdr(dir.path(), &["validate", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[rollout]\nconcurrency = 0\n").unwrap();
    let out = vdr(dir.path(), &["--config", "bad.toml", "bench", "--tasks", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rollout.concurrency"));
    let out = vdr(dir.path(), &["--config", "missing.toml", "bench"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vdr(dir.path(), &["rollout"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_reports_a_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let out = vdr(
        dir.path(),
        &["bench", "--tasks", "16", "--concurrency", "16", "--pool", "16", "--min-ms", "20", "--max-ms", "60", "--out", "bench.json"],
    );
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["identical"], true);
    assert!(report["speedup"].as_f64().unwrap() >= 5.0, "{report}");
}
