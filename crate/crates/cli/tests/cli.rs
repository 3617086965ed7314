use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lamp_core::session::load_session;
use serde_json::Value;
use tempfile::TempDir;

const TEXT: &str = "A warm, funny film with a forgettable score and one scene that drags.";

fn lamp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lamp"))
        .args(args)
        .current_dir(dir)
        .env_remove("LAMP_BASE_URL")
        .env_remove("LAMP_API_KEY")
        .env_remove("LAMP_MODEL")
        .env_remove("LAMP_SESSIONS")
        .output()
        .unwrap()
}

fn audit(dir: &Path, sessions: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "audit",
        "--mock",
        "sigmoid",
        "--seed",
        "42",
        "--created-at",
        "2026-01-01T00:00:00Z",
        "--text",
        TEXT,
        "--sessions",
        sessions,
    ];
    args.extend_from_slice(extra);
    lamp(&args, dir)
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stored_id(out: &Output) -> String {
    stdout(out).split('\t').next().unwrap().to_string()
}

#[test]
fn audits_are_reproducible_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let a = audit(dir.path(), "a", &[]);
    let b = audit(dir.path(), "b", &[]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let id = stored_id(&a);
    assert_eq!(id, stored_id(&b));
    let file = format!("{id}.json");
    assert_eq!(
        fs::read(dir.path().join("a").join(&file)).unwrap(),
        fs::read(dir.path().join("b").join(&file)).unwrap()
    );
    let session = load_session(&dir.path().join("a").join(&file)).unwrap();
    assert_eq!(session.probe.seed, 42);
    assert!(session.evaluation.is_none());
}

#[test]
fn reads_text_from_a_file() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("review.txt"), format!("{TEXT}\n")).unwrap();
    let from_file = lamp(
        &["audit", "--mock", "linear", "--input", "review.txt", "--created-at", "2026-01-01T00:00:00Z"],
        dir.path(),
    );
    assert_eq!(from_file.status.code(), Some(0));
    let inline = lamp(
        &["audit", "--mock", "linear", "--text", TEXT, "--created-at", "2026-01-01T00:00:00Z", "--sessions", "other"],
        dir.path(),
    );
    assert_eq!(stored_id(&from_file), stored_id(&inline));
    let session = load_session(&dir.path().join("sessions").join(format!("{}.json", stored_id(&from_file)))).unwrap();
    assert!(session.surrogate.r_squared >= 0.99);
}

#[test]
fn evaluate_then_report() {
    let dir = TempDir::new().unwrap();
    let out = audit(dir.path(), "s", &[]);
    let id = stored_id(&out);
    let eval = lamp(&["evaluate", &id, "--mock", "sigmoid", "--rewrite-count", "8", "--sessions", "s"], dir.path());
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let session = load_session(&dir.path().join("s").join(format!("{id}.json"))).unwrap();
    assert_eq!(session.evaluation.as_ref().unwrap().report.n_cases, 8);

    let md = lamp(&["report", &id, "--sessions", "s"], dir.path());
    let text = stdout(&md);
    assert!(text.starts_with(&format!("# Audit {id}")));
    assert!(text.contains("| surrogate |"));

    let json = lamp(&["report", &id, "--format", "json", "--sessions", "s", "-o", "r.json"], dir.path());
    assert_eq!(json.status.code(), Some(0));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["id"], Value::String(id.clone()));

    let by_path = lamp(&["report", &format!("s/{id}.json")], dir.path());
    assert_eq!(stdout(&by_path), text);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad_delta = audit(dir.path(), "s", &["--delta", "0"]);
    assert_eq!(bad_delta.status.code(), Some(2));
    assert!(!dir.path().join("s").join("drafts").exists());

    let empty = lamp(&["audit", "--mock", "sigmoid", "--text", "   "], dir.path());
    assert_eq!(empty.status.code(), Some(2));

    let unknown_preset = lamp(&["audit", "--mock", "cubic", "--text", TEXT], dir.path());
    assert_eq!(unknown_preset.status.code(), Some(2));

    let no_endpoint = lamp(&["audit", "--text", TEXT], dir.path());
    assert_eq!(no_endpoint.status.code(), Some(2));

    let missing = lamp(&["report", "0123456789abcdef", "--sessions", "s"], dir.path());
    assert_eq!(missing.status.code(), Some(2));

    fs::write(dir.path().join("broken.json"), "{\"schema_version\": \"1\"").unwrap();
    let corrupt = lamp(&["report", "broken.json"], dir.path());
    assert_eq!(corrupt.status.code(), Some(4));

    fs::write(dir.path().join("future.json"), "{\"schema_version\": \"9\"}").unwrap();
    let future = lamp(&["report", "future.json"], dir.path());
    assert_eq!(future.status.code(), Some(4));

    let usage = lamp(&["audit", "--delta", "wide"], dir.path());
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn unreachable_endpoint_exits_3_and_leaves_a_draft() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lamp"))
        .args(["audit", "--text", TEXT, "--max-retries", "0", "--repeats", "2", "--sessions", "s"])
        .current_dir(dir.path())
        .env("LAMP_BASE_URL", "http://127.0.0.1:9/v1")
        .env("LAMP_MODEL", "any")
        .env_remove("LAMP_API_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let drafts: Vec<_> = fs::read_dir(dir.path().join("s").join("drafts")).unwrap().collect();
    assert_eq!(drafts.len(), 1);
    let draft: Value = serde_json::from_str(&fs::read_to_string(drafts[0].as_ref().unwrap().path()).unwrap()).unwrap();
    assert_eq!(draft["stage"], "elicit");
}

#[test]
fn bench_surface_writes_csv() {
    let dir = TempDir::new().unwrap();
    let out = lamp(
        &["bench-surface", "--trials", "5", "--deltas", "0.1,0.3,0.6", "-o", "sweep.csv", "--summary", "sweep.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "delta,mse_theory,mse_empirical,r2_before,r2_after");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("0.3,"));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(summary["delta_star"]["kind"], "optimal");
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3);

    let stdout_run = lamp(&["bench-surface", "--trials", "5", "--deltas", "0.1,0.3,0.6"], dir.path());
    assert_eq!(stdout(&stdout_run), csv);

    let bad = lamp(&["bench-surface", "--trials", "0"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}
