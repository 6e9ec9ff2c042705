//! The `healthfog` binary: exit codes, files written, and output.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use healthfog::error::{EXIT_NETWORK, EXIT_OK, EXIT_USAGE};

fn healthfog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_healthfog")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/heart.csv").display().to_string()
}

fn repo_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&healthfog(&["--help"])), EXIT_OK);
    assert_eq!(code(&healthfog(&[])), EXIT_USAGE);
    assert_eq!(code(&healthfog(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&healthfog(&["train", "--members", "x", "a", "b"])), EXIT_USAGE);
}

#[test]
fn missing_dataset_names_path() {
    let out = tempfile::tempdir().unwrap();
    let o = healthfog(&["train", "/no/such/heart.csv", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(stderr(&o).contains("/no/such/heart.csv"), "{}", stderr(&o));
}

#[test]
fn train_writes_manifest_and_members() {
    let dir = tempfile::tempdir().unwrap();
    for n in [1usize, 5] {
        let out = dir.path().join(format!("n{n}"));
        let o = healthfog(&[
            "train",
            &dataset(),
            out.to_str().unwrap(),
            "--members",
            &n.to_string(),
            "--epochs",
            "5",
            "--seed",
            "42",
        ]);
        assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        let members = manifest["members"].as_array().unwrap();
        assert_eq!(members.len(), n);
        for i in 0..n {
            assert!(out.join(format!("member-{}.model", i + 1)).is_file());
        }
        assert!(out.join("norm_stats.txt").is_file());
        assert!(out.join("report.json").is_file());
        assert!(String::from_utf8_lossy(&o.stdout).contains("ensemble"));
    }
}

#[test]
fn submit_validates_before_network() {
    // The broker address is unreachable, so reaching the network would exit 3.
    let o = healthfog(&["submit", "--broker", "http://127.0.0.1:1", "--payload", "63,1,3,145,233,1,0,150,0,2.3,0,0"]);
    assert_eq!(code(&o), EXIT_USAGE, "{}", stderr(&o));
    let o = healthfog(&["submit", "--broker", "http://127.0.0.1:1", "--payload", "63,1,3,145,233,1,0,150,0,abc,0,0,1"]);
    assert_eq!(code(&o), EXIT_USAGE);
    let o = healthfog(&["submit", "--broker", "http://127.0.0.1:1"]);
    assert_eq!(code(&o), EXIT_USAGE);
}

#[test]
fn submit_to_unreachable_broker() {
    let o = healthfog(&["submit", "--broker", "http://127.0.0.1:1", "--payload", common::ROW1, "--timeout-ms", "2000"]);
    assert_eq!(code(&o), EXIT_NETWORK, "{}", stderr(&o));
}

#[test]
fn bench_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = healthfog(&["bench", "--scenario", &repo_file("configs/scenario.conf"), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let traces = out.join("traces.json");
    assert!(traces.is_file() && out.join("report.json").is_file());
    let first = std::fs::read(&traces).unwrap();
    let again = dir.path().join("again");
    healthfog(&["bench", "--scenario", &repo_file("configs/scenario.conf"), "--out", again.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(again.join("traces.json")).unwrap());

    let json = dir.path().join("report.json");
    let o = healthfog(&["report", "--traces", traces.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert!(report.is_object());
}

#[test]
fn bench_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "n_workers = 2\ncolour = red\n").unwrap();
    let o = healthfog(&["bench", "--scenario", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn serve_with_missing_config() {
    let o = healthfog(&["serve", "--role", "worker", "--config", "/no/such/worker.conf"]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(stderr(&o).contains("/no/such/worker.conf"));
}

#[test]
fn bundled_configs_parse() {
    use healthfog::io;
    use healthfog::node::broker::BrokerNodeConfig;
    use healthfog::node::worker::WorkerConfig;
    use healthfog_core::protocol::Scenario;
    BrokerNodeConfig::from_kv(&io::load_kv(Path::new(&repo_file("configs/broker.conf"))).unwrap()).unwrap();
    for w in ["worker-1", "worker-2"] {
        let c = WorkerConfig::from_kv(&io::load_kv(Path::new(&repo_file(&format!("configs/{w}.conf")))).unwrap(), Scenario::Worker)
            .unwrap();
        assert_eq!(c.node_id, w);
    }
    WorkerConfig::from_kv(&io::load_kv(Path::new(&repo_file("configs/cloud.conf"))).unwrap(), Scenario::Cloud).unwrap();
    for s in ["scenario.conf", "scenario-cloud.conf"] {
        io::load_sim_config(Path::new(&repo_file(&format!("configs/{s}")))).unwrap();
    }
}

struct Served(std::process::Child, String);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `serve` on an ephemeral port and returns once it prints its URL.
fn serve(role: &str, config: &Path, sets: &[String]) -> Served {
    use std::io::{BufRead, BufReader};
    let mut args = vec!["serve".to_string(), "--role".into(), role.into(), "--config".into()];
    args.push(config.display().to_string());
    args.extend(["--listen".into(), "127.0.0.1:0".into()]);
    for s in sets {
        args.extend(["--set".into(), s.clone()]);
    }
    let mut child = Command::new(env!("CARGO_BIN_EXE_healthfog"))
        .args(&args)
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let line = lines.next().unwrap().unwrap();
    let url = line.rsplit(' ').next().unwrap().to_string();
    assert!(url.starts_with("http://"), "{line}");
    std::thread::spawn(move || for _ in lines {});
    Served(child, url)
}

#[test]
fn served_stack_answers_submit() {
    let dir = tempfile::tempdir().unwrap();
    let models = dir.path().join("models");
    let o = healthfog(&["train", &dataset(), models.to_str().unwrap(), "--members", "3", "--epochs", "5"]);
    assert_eq!(code(&o), EXIT_OK);
    let conf = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let cloud = serve("cloud", &conf("cloud.conf", "manifest = models/manifest.json\n"), &[]);
    let broker = serve(
        "broker",
        &conf("broker.conf", "manifest = models/manifest.json\nheartbeat_interval_ms = 200\n"),
        &[format!("cloud_endpoint={}", cloud.1)],
    );
    let worker_conf = conf("worker.conf", "manifest = models/manifest.json\nmember = 1\nheartbeat_interval_ms = 100\n");
    let _worker = serve("worker", &worker_conf, &[format!("broker={}", broker.1)]);
    std::thread::sleep(std::time::Duration::from_millis(400));

    let o = healthfog(&["submit", "--broker", &broker.1, "--payload", common::ROW1, "--json"]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let resp: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    assert_eq!(resp["scenario"], "Worker");
    assert_eq!(resp["handled_by"], "worker-1");

    let o = healthfog(&["submit", "--broker", &broker.1, "--payload", common::ROW1, "--latency-tolerant", "--json"]);
    let resp: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    assert_eq!(resp["handled_by"], "cloud");

    let traces = dir.path().join("live.json");
    let csv = conf("rows.csv", &format!("{}\n{}\n", common::ROW1, "37,1,2,130,250,0,1,187,0,3.5,0,0,2"));
    let o = healthfog(&["submit", "--broker", &broker.1, "--file", csv.to_str().unwrap(), "--traces", traces.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("job job-").count(), 2);
    let o = healthfog(&["report", "--traces", traces.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
}
