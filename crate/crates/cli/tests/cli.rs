use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn waal() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_waal"));
    cmd.env("WAAL_LOG", "error");
    cmd
}

fn output(args: &[&str]) -> Output {
    waal().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(rounds: usize, seeds: &[u64]) -> Value {
    json!({
        "dataset": {"kind": "blobs", "k": 2, "per_class": 40, "d": 2, "spread": 0.8, "seed": 1},
        "n_init": 6,
        "rounds": rounds,
        "budget": 4,
        "hyperparams": {"epochs": 5, "minibatch": 16},
        "architecture": {"feature": [8], "critic_hidden": [8]},
        "seeds": seeds
    })
}

fn write_config(dir: &Path, config: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn divergence_exit_codes() {
    let ok = output(&["divergence", "--a", "2", "--b", "1"]);
    assert_eq!(code(&ok), 0);
    let report: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert!((report["eps_star_d2"].as_f64().unwrap() - 1.0 / 3.0).abs() <= 1e-9);
    assert!((report["eps_star_d3"].as_f64().unwrap() - 1.0 / 3.0).abs() <= 1e-9);
    assert_eq!(report["ordering_holds"], true);
    assert_eq!(report["w1_d2"].as_array().unwrap().len(), 101);
    assert_eq!(code(&output(&["divergence", "--a", "1", "--b", "2"])), 2);
    assert_eq!(code(&output(&["divergence", "--a", "3", "--b", "2"])), 2);
    assert_eq!(code(&output(&["divergence", "--a", "2", "--b", "1", "--grid", "0"])), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = output(&["gradcheck", "--configs", "3"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let text = String::from_utf8_lossy(&ok.stdout);
    for loss in ["prediction", "adversarial", "hdiv_adversarial", "lipschitz_penalty", "adversarial_with_penalty"] {
        assert!(text.contains(loss), "{text}");
    }
    assert_eq!(code(&output(&["gradcheck", "--configs", "2", "--corrupt"])), 1);
    assert_eq!(code(&output(&["gradcheck", "--configs", "2", "--corrupt", "--loss", "adversarial"])), 0);
}

#[test]
fn run_writes_one_line_per_round_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config(3, &[0, 1]));
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = waal().arg("run").arg("--config").arg(&config).arg("--out").arg(out).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let records = lines(&a);
    assert_eq!(records.len(), 6);
    let keys: Vec<(u64, u64)> = records
        .iter()
        .map(|r| (r["seed"].as_u64().unwrap(), r["round"].as_u64().unwrap()))
        .collect();
    assert_eq!(keys, [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    assert_eq!(records[2]["labeled_count"], 6 + 2 * 4);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // parallel seeds reproduce the sequential records
    let p = dir.path().join("p.jsonl");
    let o = waal()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&p)
        .arg("--parallel")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(lines(&dir.path().join("p.seed0.jsonl")), records[..3]);
    assert_eq!(lines(&dir.path().join("p.seed1.jsonl")), records[3..]);
}

#[test]
fn run_defaults_to_the_config_out_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(1, &[0]);
    config["out_path"] = json!("logs.jsonl");
    let path = write_config(dir.path(), &config);
    let o = waal().arg("run").arg("--config").arg(&path).current_dir("/").output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(lines(&dir.path().join("logs.jsonl")).len(), 1);
}

#[test]
fn run_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&waal().arg("run").arg("--config").arg(&missing).output().unwrap()), 2);
    let mut bad = small_config(1, &[0]);
    bad["budget"] = json!(0);
    let path = write_config(dir.path(), &bad);
    let o = waal().arg("run").arg("--config").arg(&path).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
    let csv = json!({"dataset": {"kind": "csv", "path": "nope.csv"}, "seeds": [0]});
    let path = write_config(dir.path(), &csv);
    assert_eq!(code(&waal().arg("run").arg("--config").arg(&path).output().unwrap()), 2);
}

#[test]
fn report_prints_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config(5, &[0]));
    let log = dir.path().join("m.jsonl");
    let o = waal().arg("run").arg("--config").arg(&config).arg("--out").arg(&log).output().unwrap();
    assert_eq!(code(&o), 0);
    let o = waal().arg("report").arg("--metrics").arg(&log).output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows = text.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).count();
    assert_eq!(rows, 5, "{text}");
    let svg = std::fs::read_to_string(dir.path().join("m.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&waal().arg("report").arg("--metrics").arg(&empty).output().unwrap()), 2);
    let bad = dir.path().join("bad.jsonl");
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&bad, text).unwrap();
    let o = waal().arg("report").arg("--metrics").arg(&bad).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 6"));
}

#[test]
fn busy_port_exits_5() {
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    assert_eq!(code(&output(&["serve", "--port", &port])), 5);
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config(1, &[0]));
    let o = waal()
        .args(["run", "--oracle", "interactive", "--port", &port, "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(code(&o), 5);
}

#[test]
fn interactive_timeout_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(2, &[0]);
    config["oracle_timeout_secs"] = json!(0.5);
    let path = write_config(dir.path(), &config);
    let port = free_port().to_string();
    let o = waal()
        .args(["run", "--oracle", "interactive", "--port", &port, "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("m.jsonl"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

/// An agent that returns error statuses as responses.
fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

struct Client {
    base: String,
}

impl Client {
    fn get(&self, path: &str) -> Value {
        let mut resp = ureq::get(format!("{}{path}", self.base)).call().unwrap();
        serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap()
    }

    fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let mut resp = agent()
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body.to_string())
            .unwrap();
        let status = resp.status().as_u16();
        (status, serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap())
    }

    /// Waits for the server to answer at all, up to `limit`.
    fn wait_ready(&self, path: &str, limit: Duration) {
        let start = Instant::now();
        while agent().get(format!("{}{path}", self.base)).call().is_err() {
            assert!(start.elapsed() < limit, "server did not come up");
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    /// Polls the batch endpoint until it awaits labels or is done.
    fn next_batch(&self, id: &str) -> Value {
        let start = Instant::now();
        loop {
            let batch = self.get(&format!("/session/{id}/batch"));
            if batch["phase"] != "TRAINING" {
                return batch;
            }
            assert!(start.elapsed() < Duration::from_secs(60), "training never finished");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Labels every pending item with class 0.
    fn label_all(&self, id: &str, batch: &Value) -> Value {
        let labels: serde_json::Map<String, Value> = batch["items"]
            .as_array()
            .unwrap()
            .iter()
            .map(|item| (item["index"].to_string(), json!(0)))
            .collect();
        let (status, body) = self.post(&format!("/session/{id}/labels"), &json!({ "labels": labels }));
        assert_eq!(status, 200, "{body}");
        body
    }
}

struct Reaper(Child);

impl Drop for Reaper {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_advances_a_session_through_rounds() {
    let port = free_port();
    let _server = Reaper(
        waal()
            .args(["serve", "--port", &port.to_string()])
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let client = Client {
        base: format!("http://127.0.0.1:{port}"),
    };
    client.wait_ready("/session/none/metrics", Duration::from_secs(20));
    let (status, created) = client.post("/session", &small_config(3, &[0]));
    assert_eq!(status, 201, "{created}");
    let id = created["session_id"].as_str().unwrap().to_string();
    let (status, _) = client.post("/session", &small_config(3, &[0]));
    assert_eq!(status, 409);

    // every round, the last included, publishes a batch
    for round in 0..3 {
        let batch = client.next_batch(&id);
        assert_eq!(batch["phase"], "AWAITING_LABELS", "{batch}");
        assert_eq!(batch["round"], round);
        assert_eq!(batch["items"].as_array().unwrap().len(), 4);
        assert_eq!(client.label_all(&id, &batch)["complete"], true);
    }
    let done = client.next_batch(&id);
    assert_eq!(done["phase"], "DONE", "{done}");
    let history = client.get(&format!("/session/{id}/metrics"));
    let rounds: Vec<u64> = history.as_array().unwrap().iter().map(|r| r["round"].as_u64().unwrap()).collect();
    assert_eq!(rounds, [0, 1, 2]);
}

#[test]
fn interactive_run_logs_every_round() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config(2, &[0]));
    let log = dir.path().join("m.jsonl");
    let port = free_port();
    let mut child = waal()
        .args(["run", "--oracle", "interactive", "--port", &port.to_string(), "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&log)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(child.stdout.take().unwrap()), &mut first).unwrap();
    let id = first.split_whitespace().nth(1).expect("session line").to_string();
    let mut child = Reaper(child);
    let client = Client {
        base: format!("http://127.0.0.1:{port}"),
    };
    client.wait_ready(&format!("/session/{id}/batch"), Duration::from_secs(20));
    for _ in 0..2 {
        let batch = client.next_batch(&id);
        assert_eq!(batch["phase"], "AWAITING_LABELS");
        client.label_all(&id, &batch);
    }
    let status = child.0.wait().unwrap();
    assert!(status.success());
    let records = lines(&log);
    assert_eq!(records.len(), 2);
    assert_eq!(records[1]["labeled_count"], 10);
}
