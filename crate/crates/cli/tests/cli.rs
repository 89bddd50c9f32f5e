use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const SMALL_CONFIG: &str = r#"
[architecture]
backbone = "tiny_test"
head_width = 64

[architecture.input_shape]
height = 64
width = 64
channels = 3

[training]
learning_rate = 0.001
batch_size = 16
epochs_stage1 = 3
epochs_stage2 = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_re-tagger"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstdout: {}\nstderr: {}", out.status, text(&out.stdout), text(&out.stderr));
}

/// A small synthetic dataset plus a config file for 64x64 training.
fn workspace(counts: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL_CONFIG).unwrap();
    ok(&run(&["synth", "--out", "data", "--counts", counts, "--seed", "1"], dir.path()));
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p.strip_prefix(dir).unwrap().to_path_buf(), bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn train_writes_bundle_report_and_config() {
    let ws = workspace("6,6,6,6,6,6");
    let out = run(
        &["train", "--manifest", "data/manifest.csv", "--out", "run1", "--backbone", "tiny_test", "--epochs1", "1", "--epochs2", "1",
          "--config", "small.toml"],
        ws.path(),
    );
    ok(&out);
    let run1 = ws.path().join("run1");
    for f in ["bundle/VERSION", "bundle/weights.bin", "report.jsonl", "config.toml", "train.csv", "validation.csv"] {
        assert!(run1.join(f).is_file(), "{f}");
    }
    // Flags override the file; the file overrides defaults.
    let effective = std::fs::read_to_string(run1.join("config.toml")).unwrap();
    assert!(effective.contains("epochs_stage1 = 1"), "{effective}");
    assert!(effective.contains("learning_rate = 0.001"), "{effective}");
    assert!(effective.contains("rho = 0.9"), "{effective}");
    let report = std::fs::read_to_string(run1.join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn same_seed_gives_identical_bundles() {
    let ws = workspace("4,4,4,4,4,4");
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        ok(&run(
            &["train", "--manifest", "data/manifest.csv", "--out", out, "--config", "small.toml", "--epochs1", "1", "--epochs2", "1",
              "--seed", seed],
            ws.path(),
        ));
    }
    let (a, b, c) = (files(&ws.path().join("a/bundle")), files(&ws.path().join("b/bundle")), files(&ws.path().join("c/bundle")));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn missing_manifest_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--manifest", "nope.csv", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("nope.csv"));
}

#[test]
fn bad_flags_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--manifest", "m.csv"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["train", "--manifest", "m.csv", "--out", "o", "--backbone", "alexnet"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn eval_predict_round_trip() {
    let ws = workspace("16,16,16,16,16,16");
    ok(&run(&["train", "--manifest", "data/manifest.csv", "--out", "run", "--config", "small.toml"], ws.path()));
    ok(&run(&["synth", "--out", "test", "--counts", "5,5,5,5,5,5", "--seed", "2"], ws.path()));

    // Label a fresh set with the bundle's own predictions: a fixture the
    // bundle classifies perfectly by construction.
    let mut manifest = String::from("path,raw_tag\n");
    let mut predicted = std::collections::BTreeSet::new();
    for line in std::fs::read_to_string(ws.path().join("test/manifest.csv")).unwrap().lines().skip(1) {
        let rel = line.split(',').next().unwrap();
        let out = run(&["predict", "--bundle", "run/bundle", &format!("test/{rel}"), "--top"], ws.path());
        ok(&out);
        let stdout = text(&out.stdout);
        let mut lines = stdout.lines();
        let json: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(json.as_object().unwrap().len(), 6);
        let top = lines.next().unwrap().to_string();
        manifest.push_str(&format!("{rel},{top}\n"));
        predicted.insert(top);
    }
    assert_eq!(predicted.len(), 6, "bundle never predicts some class: {predicted:?}");
    std::fs::write(ws.path().join("test/relabeled.csv"), manifest).unwrap();

    let out = run(&["eval", "--bundle", "run/bundle", "--manifest", "test/relabeled.csv", "--out", "ev"], ws.path());
    ok(&out);
    let table = text(&out.stdout);
    for row in table.lines().skip(1).take(3) {
        assert_eq!(row.split_whitespace().filter(|v| *v == "1.00").count(), 7, "{table}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path().join("ev/eval.json")).unwrap()).unwrap();
    for m in report["per_class"].as_object().unwrap().values() {
        let (p, r, f) = (m["precision"].as_f64().unwrap(), m["recall"].as_f64().unwrap(), m["f1"].as_f64().unwrap());
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }
    assert!(ws.path().join("ev/table.txt").is_file());
    assert!(ws.path().join("ev/config.toml").is_file());

    // The real labels give a table whose F1 values are harmonic means too.
    let out = run(&["eval", "--bundle", "run/bundle", "--manifest", "test/manifest.csv", "--out", "ev2"], ws.path());
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path().join("ev2/eval.json")).unwrap()).unwrap();
    for m in report["per_class"].as_object().unwrap().values() {
        let (p, r, f) = (m["precision"].as_f64().unwrap(), m["recall"].as_f64().unwrap(), m["f1"].as_f64().unwrap());
        let expected = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        assert!((f - expected).abs() < 1e-12);
    }
}

#[test]
fn predict_and_eval_reject_bad_inputs() {
    let ws = workspace("2,2,2,2,2,2");
    ok(&run(
        &["train", "--manifest", "data/manifest.csv", "--out", "run", "--config", "small.toml", "--epochs1", "0", "--epochs2", "0"],
        ws.path(),
    ));
    let out = run(&["predict", "--bundle", "run/bundle", "data/manifest.csv"], ws.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["eval", "--bundle", "nowhere", "--manifest", "data/manifest.csv"], ws.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["predict", "--bundle", "run/bundle", "data/kitchen/0000.png"], ws.path());
    ok(&out);
    assert_eq!(text(&out.stdout).lines().count(), 1);
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn serve_reports_busy_port_and_stops_on_sigterm() {
    let ws = workspace("2,2,2,2,2,2");
    ok(&run(
        &["train", "--manifest", "data/manifest.csv", "--out", "run", "--config", "small.toml", "--epochs1", "0", "--epochs2", "0"],
        ws.path(),
    ));

    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let busy = taken.local_addr().unwrap().port().to_string();
    let out = run(&["serve", "--bundle", "run/bundle", "--port", &busy], ws.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains(&busy), "{}", text(&out.stderr));

    let port = free_port();
    let mut child = bin()
        .args(["serve", "--bundle", "run/bundle", "--port", &port.to_string()])
        .current_dir(ws.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let started = Instant::now();
    loop {
        if let Some(resp) = http_get(port, "/healthz") {
            if resp.starts_with("HTTP/1.1 200") {
                assert!(resp.contains("re-tagger-bundle/1"));
                break;
            }
        }
        assert!(started.elapsed() < Duration::from_secs(60), "server did not become healthy");
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(http_get(port, "/foo").unwrap().starts_with("HTTP/1.1 404"));
    let killed = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
}
