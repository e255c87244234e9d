use std::path::Path;
use std::process::{Command, Output};

fn hmn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &[&str] = &["--preset", "tiny", "--delta", "2", "--episodes", "12", "--frames", "6"];

fn with(base: &[&'static str], rest: &[&'static str]) -> Vec<&'static str> {
    base.iter().chain(rest).copied().collect()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        assert_eq!(code(&hmn(dir.path(), &[flag])), 0);
    }
    assert!(stdout(&hmn(dir.path(), &["train", "--help"])).contains("--variant"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&hmn(p, &["--bogus"])), 1);
    assert_eq!(code(&hmn(p, &[])), 1);
    assert_eq!(code(&hmn(p, &["--lr", "abc", "gen-data", "--out", "x"])), 1);
    assert_eq!(code(&hmn(p, &["--split", "0.5,0.5", "gen-data", "--out", "x"])), 1);
    std::fs::write(p.join("bad.cfg"), "no_such_key = 3\n").unwrap();
    assert_eq!(code(&hmn(p, &["--config", "bad.cfg", "gen-data", "--out", "x"])), 1);
    assert!(!p.join("x").exists());
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = hmn(p, &with(SMALL, &["eval", "--checkpoint", "missing.hmn", "--data", "missing.fgr"]));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    std::fs::write(p.join("junk.fgr"), b"not a record file").unwrap();
    assert_eq!(code(&hmn(p, &with(SMALL, &["train", "--data", "junk.fgr", "--out", "m.hmn"]))), 2);
}

#[test]
fn config_file_and_flags_layer_over_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.cfg"), "# small world\nepisodes = 5\nframes=4\ndelta = 2\n").unwrap();
    let out = hmn(p, &["--preset", "tiny", "--config", "run.cfg", "--episodes", "7", "gen-data", "--out", "d.fgr"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("wrote 7 episodes"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = |args: Vec<&str>| {
        let out = hmn(p, &args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };

    ok(with(SMALL, &["gen-data", "--out", "d.fgr", "--jobs", "2"]));
    ok(with(SMALL, &["--steps", "6", "train", "--data", "d.fgr", "--out", "m.hmn", "--loss-csv", "loss.csv"]));
    let loss = std::fs::read_to_string(p.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("step,d_loss,g_adv,g_cls,g_mse"));
    assert_eq!(lines.count(), 6);

    let metrics = ok(with(
        SMALL,
        &["eval", "--checkpoint", "m.hmn", "--data", "d.fgr", "--part", "all", "--scores", "s.csv", "--out", "m.json"],
    ));
    let json: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    for key in ["frame_acc", "video_acc", "eer", "apcer", "bpcer", "future_mse"] {
        assert!(json[key].is_number(), "{key} missing from {json}");
    }
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("m.json")).unwrap()).unwrap();
    assert_eq!(saved, json);
    let scores = std::fs::read_to_string(p.join("s.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("episode,frame,label,p_fake"));
    assert_eq!(scores.lines().count(), 1 + 12 * 6);

    ok(with(SMALL, &["project", "--checkpoint", "m.hmn", "--data", "d.fgr", "--part", "all", "--out", "p.csv"]));
    let proj = std::fs::read_to_string(p.join("p.csv")).unwrap();
    assert_eq!(proj.lines().next(), Some("episode,frame,label,x,y"));
    assert_eq!(proj.lines().count(), 1 + 12 * 6);

    ok(with(SMALL, &["trace", "--checkpoint", "m.hmn", "--data", "d.fgr", "--part", "all", "--episode", "3", "--out", "t.jsonl"]));
    let trace = std::fs::read_to_string(p.join("t.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["episode"], 3);
        let beta: f64 = v["beta"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).sum();
        assert!((beta - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&hmn(p, &with(SMALL, &["gen-data", "--out", "d.fgr"]))), 0);
    let out = hmn(
        p,
        &with(SMALL, &["--steps", "3", "ablate", "--data", "d.fgr", "--variants", "full,no-gan", "--out", "a.csv"]),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("full,"));
    assert_eq!(code(&hmn(p, &with(SMALL, &["ablate", "--data", "d.fgr", "--variants", "no-such"]))), 1);
}

#[test]
fn grad_check_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = hmn(dir.path(), &["grad-check", "--check-frames", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(v["checked"].as_u64().unwrap() > 0);
}

#[test]
fn sweep_trains_once_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = hmn(
        dir.path(),
        &with(SMALL, &["--steps", "2", "sweep", "--param", "memory-len", "--values", "1,3", "--jobs", "2", "--out", "w.csv"]),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("w.csv")).unwrap();
    let keys: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["memory-len", "1", "3"]);
}
