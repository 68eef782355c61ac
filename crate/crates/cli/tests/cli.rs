use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use cagg_core::engine::EngineSettings;
use cagg_core::ledger::verify_bytes;
use cagg_core::policy::PolicyConfig;
use cagg_core::{Engine, IntensitySeries, ProvenanceRecord, VirtualClock};
use cagg_service::{serve, AppState};
use serde_json::Value;
use tempfile::TempDir;

const TRACE: &str =
    "# test grid\nstart = 2026-06-01T00:00:00Z\nstep = 3600\n100\n400\n90\n80\n120\n";

struct Local {
    dir: TempDir,
}

impl Local {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("grid.trace"), TRACE).unwrap();
        Self { dir }
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn run(&self, at: &str, args: &[&str]) -> Output {
        let trace = self.dir.path().join("grid.trace");
        let mut cmd = bare();
        cmd.args(["--local", "--at", at, "--data-dir"])
            .arg(self.data())
            .arg("--intensity-trace")
            .arg(trace)
            .args(args);
        cmd.output().unwrap()
    }
}

fn bare() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cagg"));
    for var in [
        "CAGG_SERVER",
        "CAGG_TOKEN",
        "CAGG_DATA_DIR",
        "CAGG_POLICY_PATH",
        "CAGG_INTENSITY_TRACE",
    ] {
        cmd.env_remove(var);
    }
    cmd
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: {}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn records(path: &Path) -> Vec<ProvenanceRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const AT: &str = "2026-06-01T00:30:00Z";

#[test]
fn gate_record_verify_and_export_locally() {
    let l = Local::new();
    assert_eq!(
        code(&l.run(AT, &["budget", "set", "pr:1", "--allocation", "50"])),
        0
    );

    let out = l.run(
        AT,
        &[
            "gate",
            "check",
            "--scope",
            "pr:1",
            "--risk",
            "0.2",
            "--est-carbon",
            "5",
        ],
    );
    assert_eq!(code(&out), 0);
    let decision = json(&out);
    assert_eq!(decision["verdict"]["kind"], "allow");
    let reservation = decision["reservation"].as_str().unwrap().to_string();

    // 1e6 small-tier tokens: 1e6 * 0.3 J / 3.6e6 * 1.2 PUE * 100 g/kWh = 10 g.
    let out = l.run(
        AT,
        &[
            "record",
            "--reservation",
            &reservation,
            "--item",
            "inference:small:1000000",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!((json(&out)["carbon"].as_f64().unwrap() - 10.0).abs() < 1e-9);

    let budget = json(&l.run(AT, &["budget", "show", "pr:1"]));
    assert!((budget["consumed"].as_f64().unwrap() - 10.0).abs() < 1e-9);
    assert_eq!(budget["reserved"].as_f64().unwrap(), 0.0);

    let out = l.run(AT, &["ledger", "verify"]);
    assert_eq!(code(&out), 0);
    let report = json(&out);
    assert_eq!(report["chain_valid"], true);
    assert!((report["total_carbon"].as_f64().unwrap() - 10.0).abs() < 1e-9);

    let export = l.dir.path().join("export.jsonl");
    assert_eq!(
        code(&l.run(AT, &["ledger", "export", "--out", export.to_str().unwrap()])),
        0
    );
    let bytes = std::fs::read(&export).unwrap();
    assert_eq!(bytes, std::fs::read(l.data().join("ledger.jsonl")).unwrap());

    let mut tampered = bytes.clone();
    let second_line = bytes.iter().position(|b| *b == b'\n').unwrap() + 1;
    let digit = second_line
        + bytes[second_line..]
            .iter()
            .position(|b| b.is_ascii_digit())
            .unwrap();
    tampered[digit] = if tampered[digit] == b'9' {
        b'8'
    } else {
        tampered[digit] + 1
    };
    let copy = l.dir.path().join("tampered.jsonl");
    std::fs::write(&copy, &tampered).unwrap();
    let out = bare()
        .args(["ledger", "verify", "--file"])
        .arg(&copy)
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    let report = json(&out);
    assert_eq!(report["chain_valid"], false);
    assert_eq!(report["first_invalid_seq"], 1);
    assert_eq!(verify_bytes(&tampered).first_invalid_seq, Some(1));
}

#[test]
fn verdicts_map_to_exit_codes() {
    let l = Local::new();
    l.run(AT, &["budget", "set", "pr:1", "--allocation", "50"]);

    // 01:30 sits in the 400 g/kWh hour. Of the hours that fit before the
    // deadline, 03:00 (80) beats 02:00 (90).
    let out = l.run(
        "2026-06-01T01:30:00Z",
        &[
            "gate",
            "check",
            "--scope",
            "pr:1",
            "--risk",
            "0.2",
            "--est-carbon",
            "1",
            "--deferrable-by",
            "7200",
        ],
    );
    assert_eq!(code(&out), 10);
    assert_eq!(json(&out)["verdict"]["until"], "2026-06-01T03:00:00Z");

    let out = l.run(
        AT,
        &[
            "gate",
            "check",
            "--scope",
            "pr:1",
            "--risk",
            "0.2",
            "--est-carbon",
            "80",
        ],
    );
    assert_eq!(code(&out), 20);
    let review = json(&out)["verdict"]["review_id"]
        .as_str()
        .unwrap()
        .to_string();

    let pending = json(&l.run(AT, &["reviews", "pending"]));
    assert_eq!(pending[0]["review_id"], review.as_str());
    assert_eq!(pending[0]["trigger"], "budget_hard_exceeded");

    let out = l.run(
        AT,
        &["reviews", "decide", &review, "--deny", "--approver", "dana"],
    );
    assert_eq!(code(&out), 30);
    let out = l.run(
        AT,
        &[
            "reviews",
            "decide",
            &review,
            "--approve",
            "--approver",
            "erin",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("already"));
}

#[test]
fn loops_block_and_terminate() {
    let l = Local::new();
    l.run(AT, &["budget", "set", "pr:1", "--allocation", "50"]);
    for n in 1..=3 {
        let out = l.run(AT, &["loops", "attempt", "pr1#doc", "--scope", "pr:1"]);
        assert_eq!(code(&out), 0);
        assert_eq!(json(&out)["attempts"], n);
    }
    assert_eq!(
        json(&l.run(AT, &["loops", "show", "pr1#doc"]))["state"],
        "blocked"
    );
    assert_eq!(
        code(&l.run(AT, &["loops", "attempt", "pr1#doc", "--scope", "pr:1"])),
        1
    );

    let gate = [
        "gate",
        "check",
        "--scope",
        "pr:1",
        "--risk",
        "0.1",
        "--est-carbon",
        "1",
        "--loop-id",
        "pr1#doc",
    ];
    assert_eq!(code(&l.run(AT, &gate)), 20);

    let out = l.run(
        AT,
        &[
            "loops",
            "justify",
            "pr1#doc",
            "--approver",
            "sam",
            "--text",
            "new fixture",
            "--extension",
            "2",
        ],
    );
    assert_eq!(json(&out)["cap"], 5);
    assert!(json(&l.run(AT, &["reviews", "pending"]))
        .as_array()
        .unwrap()
        .is_empty());
    assert_eq!(code(&l.run(AT, &gate)), 0);

    l.run(
        AT,
        &[
            "loops",
            "terminate",
            "pr1#doc",
            "--approver",
            "sam",
            "--reason",
            "superseded",
        ],
    );
    let out = l.run(AT, &gate);
    assert_eq!(code(&out), 30);
    let rationale = json(&out)["rationale"].to_string();
    assert!(rationale.contains("regen.terminated"), "{rationale}");
}

#[test]
fn estimate_comes_from_the_plan_when_omitted() {
    let l = Local::new();
    l.run(AT, &["budget", "set", "pr:1", "--allocation", "50"]);
    assert_eq!(
        code(&l.run(AT, &["gate", "check", "--scope", "pr:1", "--risk", "0.2"])),
        0
    );
    assert_eq!(
        code(&l.run(AT, &["gate", "check", "--scope", "pr:1", "--risk", "0.9"])),
        0
    );
    let recs = records(&l.data().join("ledger.jsonl"));
    let est = |i: usize| {
        serde_json::to_value(&recs[i].payload).unwrap()["est_carbon"]
            .as_f64()
            .unwrap()
    };
    // Lightweight only: 2000 tokens * 0.3 J on small.
    let light = 2000.0 * 0.3 / 3.6e6 * 1.2 * 100.0;
    assert!((est(0) - light).abs() < 1e-12);
    // Plus 20000 tokens * 3.0 J on large.
    let deep = light + 20000.0 * 3.0 / 3.6e6 * 1.2 * 100.0;
    assert!((est(1) - deep).abs() < 1e-12);
}

#[test]
fn usage_errors_exit_one() {
    let l = Local::new();
    let out = l.run(AT, &["record", "--scope", "pr:1", "--unbudgeted"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--item"));
    let out = l.run(
        AT,
        &[
            "record",
            "--scope",
            "pr:1",
            "--unbudgeted",
            "--item",
            "training:small:10",
        ],
    );
    assert_eq!(code(&out), 1);
    let out = bare().args(["--local", "budget", "show"]).output().unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--intensity-trace"));
    let out = l.run(
        AT,
        &[
            "gate",
            "check",
            "--scope",
            "pr:9",
            "--risk",
            "0.2",
            "--est-carbon",
            "1",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn policy_template_round_trips() {
    let out = bare().args(["policy", "template"]).output().unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        PolicyConfig::from_toml(&text).unwrap(),
        PolicyConfig::default()
    );
}

#[test]
fn simulate_replays_a_written_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.json");
    let a = bare()
        .args([
            "simulate",
            "--seed",
            "3",
            "--entries",
            "60",
            "--write-trace",
        ])
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(code(&a), 0);
    let b = bare()
        .args(["simulate", "--trace"])
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(a.stdout, b.stdout);
    let report = json(&a);
    assert_eq!(report["governed"]["entries"], 60);
    assert!(report.get("baseline").is_none());

    let denied = json(
        &bare()
            .args(["simulate", "--seed", "3", "--entries", "60", "--auto-deny"])
            .output()
            .unwrap(),
    );
    assert_eq!(
        denied["governed"]["escalated"],
        denied["governed"]["denied"]
    );
}

struct Service {
    base: String,
    rt: tokio::runtime::Runtime,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    handle: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

impl Service {
    fn start(token: Option<&str>) -> Self {
        let clock = Arc::new(VirtualClock::new(AT.parse().unwrap()));
        let settings = EngineSettings {
            policy: PolicyConfig::default(),
            policy_path: None,
            intensity: IntensitySeries::parse_trace(TRACE).unwrap(),
            intensity_path: None,
            clock,
        };
        let mut state = AppState::new(Arc::new(Engine::in_memory(settings).unwrap()));
        if let Some(t) = token {
            state = state.with_token(t);
        }
        let rt = tokio::runtime::Runtime::new().unwrap();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let handle = rt.spawn(serve(listener, state, async {
            let _ = rx.await;
        }));
        Self {
            base,
            rt,
            stop: Some(tx),
            handle: Some(handle),
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        bare()
            .args(["--server", &self.base])
            .args(args)
            .output()
            .unwrap()
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.stop.take().unwrap().send(());
        let _ = self.rt.block_on(self.handle.take().unwrap());
    }
}

#[test]
fn remote_mode_talks_to_the_service() {
    let s = Service::start(None);
    assert_eq!(
        code(&s.run(&[
            "budget",
            "set",
            "release:v1/pipeline:ci",
            "--allocation",
            "30"
        ])),
        0
    );
    let out = s.run(&[
        "gate",
        "check",
        "--scope",
        "release:v1/pipeline:ci",
        "--kind",
        "pipeline",
        "--risk",
        "0.6",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let reservation = json(&out)["reservation"].as_str().unwrap().to_string();

    let out = s.run(&[
        "record",
        "--reservation",
        &reservation,
        "--item",
        "inference:medium:9000:1000",
    ]);
    assert_eq!(code(&out), 0);
    // 10000 tokens * 1.0 J / 3.6e6 * 1.2 * 100.
    assert!((json(&out)["carbon"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-9);

    let out = s.run(&[
        "gate",
        "check",
        "--scope",
        "release:v1/pipeline:ci",
        "--risk",
        "0.2",
        "--est-carbon",
        "40",
    ]);
    assert_eq!(code(&out), 20);
    let review = json(&out)["verdict"]["review_id"]
        .as_str()
        .unwrap()
        .to_string();
    let out = s.run(&[
        "reviews",
        "decide",
        &review,
        "--approve",
        "--approver",
        "ops",
    ]);
    assert_eq!(code(&out), 0);
    let decision = json(&out);
    assert!(decision["rationale"]
        .to_string()
        .contains("budget.override"));

    let out = s.run(&["budget", "show", "pr:404"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("404"));

    let out = s.run(&[
        "loops",
        "attempt",
        "ci#a/b",
        "--scope",
        "release:v1/pipeline:ci",
    ]);
    assert_eq!(json(&out)["loop_id"], "ci#a/b");
    assert_eq!(json(&s.run(&["loops", "show", "ci#a/b"]))["attempts"], 1);

    let out = s.run(&["ledger", "export", "--format", "lines"]);
    assert_eq!(code(&out), 0);
    assert!(verify_bytes(&out.stdout).chain_valid);
    assert_eq!(json(&s.run(&["policy", "show"]))["deep_threshold"], 0.5);
}

#[test]
fn remote_mode_sends_the_token() {
    let s = Service::start(Some("s3cret"));
    let out = s.run(&["budget", "show"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("401"));
    let out = s.run(&["--token", "s3cret", "budget", "show"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out), Value::Array(vec![]));
}

#[test]
fn unreachable_server_is_reported() {
    let out = bare()
        .args(["--server", "http://127.0.0.1:9", "budget", "show"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot reach"));
}
