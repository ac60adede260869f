use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn dualrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualrl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = dualrl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

fn assert_provenance(path: &Path, seed: u64) {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.contains("config_hash"), "{} lacks a config hash", path.display());
    assert!(text.contains(&format!("seed{}{seed}", if path.extension().unwrap() == "ck" { " " } else { "" })) || text.contains(&format!("\"seed\": {seed}")) || text.contains(&format!("seed: {seed}")), "{} lacks the seed", path.display());
    assert!(text.contains("dualrl") && text.contains("--seed"), "{} lacks the command", path.display());
}

#[test]
fn pipeline_runs_end_to_end_and_stamps_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let p = |f: &str| format!("{d}/{f}");
    let gen = ok(&["gen-data", "--seed", "4", "--out", d, "--set", "users=8", "--set", "trials=50"]);
    assert_eq!(gen["rows"], 400);
    ok(&["train-answer", "--seed", "4", "--out", d, "--set", "bank_size=2000", "--set", "agent.epochs=1", "--set", "agent.hidden=8"]);
    ok(&["train-baseline", "--seed", "4", "--out", d, "--dataset", &p("dataset.csv"), "--answer", &p("answer.ck")]);
    let sim = ok(&[
        "train-sim", "--seed", "4", "--out", d, "--dataset", &p("dataset.csv"), "--answer", &p("answer.ck"), "--baseline", &p("baseline.ck"),
        "--set", "agent.ppo.total_steps=512", "--set", "agent.ppo.rollout_len=256",
    ]);
    assert!(sim["agent_mape"].as_f64().unwrap().is_finite());
    ok(&[
        "train-reg", "--seed", "4", "--out", d, "--sim", &p("sim.ck"), "--baseline", &p("baseline.ck"), "--answer", &p("answer.ck"),
        "--set", "agent.ppo.total_steps=400", "--set", "agent.ppo.rollout_len=200", "--set", "agent.env.trials=20",
    ]);
    let eval = ok(&["eval", "--seed", "4", "--out", d, "--policy", &p("reg.ck"), "--set", "users=4", "--set", "env.trials=20"]);
    assert_eq!(eval["controllers"].as_array().unwrap().len(), 4);
    assert!(eval["rl_beats_random_bootstrap"].is_number());

    for f in [
        "dataset.csv", "answer.ck", "answer_report.json", "baseline.ck", "baseline_report.json", "sim.ck", "sim_curve.csv",
        "sim_traces.csv", "sim_report.json", "reg.ck", "reg_curve.csv", "reg_episode.csv", "reg_report.json", "eval_report.json",
        "eval_blocks_rl.csv", "eval_delta_random.csv", "train-sim.config.toml",
    ] {
        assert_provenance(&dir.path().join(f), 4);
    }
    assert_eq!(data_lines(&dir.path().join("sim_curve.csv"))[0], "step,mean_return,clip_fraction,value_loss");
    assert_eq!(data_lines(&dir.path().join("reg_episode.csv"))[0], "trial_index,action,Ru_i,r_s,r_e,r_hat");
    assert_eq!(data_lines(&dir.path().join("dataset.csv"))[0], "user_id,trial,ab,cd,e,pressure,choice,rt");
}

#[test]
fn same_seed_same_data_different_seed_different_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        ok(&["gen-data", "--seed", seed, "--out", dir.path().to_str().unwrap(), "--set", "users=3", "--set", "trials=20"]);
    }
    let rows = |d: &tempfile::TempDir| data_lines(&d.path().join("dataset.csv"));
    assert_eq!(rows(&a), rows(&b));
    assert_ne!(rows(&a), rows(&c));
}

#[test]
fn full_size_dataset_has_the_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let r = ok(&["gen-data", "--out", dir.path().to_str().unwrap(), "--set", "users=50", "--set", "trials=500"]);
    assert_eq!(r["rows"], 25_000);
    let frac = r["pressured_fraction"].as_f64().unwrap();
    assert!((0.47..=0.53).contains(&frac));
}

#[test]
fn random_controller_gives_about_half_feedback_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let r = ok(&["eval", "--seed", "2", "--out", dir.path().to_str().unwrap()]);
    let random = r["controllers"].as_array().unwrap().iter().find(|c| c["summary"]["controller"] == "random").unwrap();
    for b in random["summary"]["blocks"]["blocks"].as_array().unwrap() {
        let pct = b["feedback_pct"].as_f64().unwrap();
        assert!((0.45..=0.55).contains(&pct), "{pct}");
    }
}

#[test]
fn exit_codes_separate_validation_from_success() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(dualrl(&["eval", "--out", d, "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(dualrl(&["eval", "--out", d, "--set", "users"]).status.code(), Some(1));
    assert_eq!(dualrl(&["train-baseline", "--out", d, "--dataset", "/missing.csv", "--answer", "/missing.ck"]).status.code(), Some(1));
    assert_eq!(dualrl(&["eval", "--out", d, "--policy", "/missing.ck"]).status.code(), Some(1));
    assert_eq!(dualrl(&["train-reg", "--out", d]).status.code(), Some(1));
    assert_eq!(dualrl(&["no-such-command"]).status.code(), Some(1));
    let bad_config = dir.path().join("bad.toml");
    std::fs::write(&bad_config, "users = \"many\"\n").unwrap();
    assert_eq!(dualrl(&["eval", "--out", d, "--config", bad_config.to_str().unwrap()]).status.code(), Some(1));
    let printed = dualrl(&["train-sim", "--seed", "7", "--print-config", "--dataset", "x", "--answer", "y"]);
    assert_eq!(printed.status.code(), Some(0));
    let text = String::from_utf8(printed.stdout).unwrap();
    assert!(text.contains("gae_lambda = 1.0") && text.contains("seed = 7"));
}

#[test]
fn serve_answers_http_and_persists_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dualrl"))
        .args(["serve", "--out", dir.path().to_str().unwrap(), "--set", "addr=\"127.0.0.1:0\""])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(rest) = line.split("http://").nth(1) {
            break rest.trim().to_string();
        }
    };
    let request = |method: &str, path: &str, body: &str| {
        let mut s = TcpStream::connect(&addr).unwrap();
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        resp
    };
    let created = request("POST", "/sessions", r#"{"participant":"cli-test","group":"random"}"#);
    assert!(created.starts_with("HTTP/1.1 201"), "{created}");
    let next = request("GET", "/sessions/s-000001/next", "");
    assert!(next.starts_with("HTTP/1.1 200") && next.contains("\"practice1\""), "{next}");
    let rl = request("POST", "/sessions", r#"{"participant":"cli-rl","group":"rl"}"#);
    assert!(rl.starts_with("HTTP/1.1 422"), "{rl}");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(dir.path().join("sessions").join("s-000001.jsonl").is_file());
}
