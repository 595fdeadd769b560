use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmnet"))
        .args(args)
        .env("HMNET_THREADS", "4")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let o = hmnet(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("summary is JSON")
}

fn error_line(o: &Output) -> Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr);
    let v: Value = serde_json::from_str(line.trim()).expect("stderr is one JSON line");
    v["error"].clone()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, format: &str) -> String {
    let out = dir.join("gen");
    ok(&["gen", "--out", p(&out), "--duration-us", "50000", "--seed", "3", "--format", format]);
    p(&out.join(format!("events.{format}"))).to_owned()
}

#[test]
fn generated_stream_runs_and_reruns_from_its_config() {
    let d = tempfile::tempdir().unwrap();
    let events = generate(d.path(), "hmev");
    for f in ["scene.json", "truth.json"] {
        assert!(d.path().join("gen").join(f).is_file());
    }
    let a = d.path().join("a");
    let s = ok(&["run", "--events", &events, "--out", p(&a), "--steps", "10", "--save-readouts"]);
    assert_eq!(s["steps"], 10);
    for f in ["config.json", "invocation.json", "trace.csv", "timing.csv", "checkpoint.bin", "readouts.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let readouts: Value = serde_json::from_str(&fs::read_to_string(a.join("readouts.json")).unwrap()).unwrap();
    assert_eq!(readouts.as_array().unwrap().len(), 3);

    // same config, parallel executor, parameters from the checkpoint
    let b = d.path().join("b");
    let cfg = a.join("config.json");
    let ckpt = a.join("checkpoint.bin");
    ok(&[
        "run", "--events", &events, "--out", p(&b), "--steps", "10", "--config", p(&cfg), "--checkpoint", p(&ckpt),
        "--workers", "3",
    ]);
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(fs::read(a.join("config.json")).unwrap(), fs::read(b.join("config.json")).unwrap());
}

#[test]
fn csv_events_need_the_sensor_size() {
    let d = tempfile::tempdir().unwrap();
    let events = generate(d.path(), "csv");
    let out = d.path().join("r");
    let e = error_line(&hmnet(&["run", "--events", &events, "--out", p(&out)]));
    assert_eq!(e["command"], "run");
    ok(&["run", "--events", &events, "--out", p(&out), "--width", "64", "--height", "64", "--steps", "4"]);
}

#[test]
fn bad_input_reports_a_json_error() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("x");
    let junk = d.path().join("junk.hmev");
    fs::write(&junk, b"not events").unwrap();
    let e = error_line(&hmnet(&["run", "--events", p(&junk), "--out", p(&out)]));
    assert_eq!(e["kind"], "input");

    let events = generate(d.path(), "hmev");
    let e = error_line(&hmnet(&["run", "--events", &events, "--out", p(&out), "--dt-us", "0"]));
    assert_eq!(e["kind"], "config");
    let e = error_line(&hmnet(&["run", "--events", &events, "--out", p(&out), "--variant", "B9"]));
    assert_eq!(e["kind"], "config");

    let o = hmnet(&["run", "--nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["kind"], "usage");
}

#[test]
fn trace_prints_the_compiled_schedule() {
    let o = hmnet(&["trace", "--steps", "10", "--no-down-write"]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,level,action"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(&rows[..3], ["0,1,readout", "0,2,readout", "0,3,readout"]);
    assert!(rows.iter().all(|r| !r.contains("down")));
    assert!(rows.contains(&"9,2,make_up_snapshot") && rows.contains(&"10,3,up_write"));

    let d = tempfile::tempdir().unwrap();
    ok(&["trace", "--steps", "10", "--no-down-write", "--out", p(d.path())]);
    assert_eq!(fs::read_to_string(d.path().join("trace.csv")).unwrap(), csv);
}

#[test]
fn bench_writes_its_tables() {
    let d = tempfile::tempdir().unwrap();
    let s = ok(&["bench", "--out", p(d.path()), "--steps", "4", "--repetitions", "2", "--workers", "2"]);
    assert!(s["macs_per_step"].as_f64().unwrap() > 0.0);
    let steps = fs::read_to_string(d.path().join("bench_steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 5);
    let levels = fs::read_to_string(d.path().join("bench_levels.csv")).unwrap();
    assert_eq!(levels.lines().count(), 4);
    assert!(fs::read_to_string(d.path().join("bench.csv")).unwrap().starts_with("step,level,action,macs,wall_ns\n"));
}

#[test]
fn gradcheck_and_training_write_outputs() {
    let d = tempfile::tempdir().unwrap();
    let s = ok(&["gradcheck", "--seeds", "1", "--out", p(d.path())]);
    assert_eq!(s["failing"], 0);
    assert!(fs::read_to_string(d.path().join("gradcheck.csv")).unwrap().starts_with("op,param,max_rel_err,pass\n"));

    let t = d.path().join("t");
    let s = ok(&["train-demo", "--out", p(&t), "--iterations", "30", "--smooth", "5"]);
    assert_eq!(s["iterations"], 30);
    let loss = fs::read_to_string(t.join("loss.csv")).unwrap();
    // rows start once the 5-iteration window is full
    assert_eq!(loss.lines().count(), 1 + 30 - 4);
    let cfg = t.join("train_config.json");
    let again = d.path().join("t2");
    ok(&["train-demo", "--config", p(&cfg), "--out", p(&again)]);
    assert_eq!(loss, fs::read_to_string(again.join("loss.csv")).unwrap());

    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"iterations": 5, "momentum": 0.9}"#).unwrap();
    assert_eq!(error_line(&hmnet(&["train-demo", "--config", p(&bad), "--out", p(&again)]))["kind"], "config");
}
