use std::process::Command;
use std::time::Instant;

use mip_harness::{run_scenario, HarnessError, RunOptions, Scenario, Transcript};

const CANONICAL: &str = include_str!("../scenarios/canonical.json");
const NON_DISPATCHABLE: &str = include_str!("../scenarios/non_dispatchable.json");
const GOLDEN: &str = include_str!("golden/canonical.json");

fn canonical() -> Scenario {
    Scenario::from_json(CANONICAL).unwrap()
}

#[test]
fn canonical_run_matches_golden_transcript() {
    let started = Instant::now();
    let t = run_scenario(&canonical(), &RunOptions::default()).unwrap();
    assert!(started.elapsed().as_secs_f64() < 10.0);
    let golden: Transcript = serde_json::from_str(GOLDEN).unwrap();
    assert_eq!(t.canonical(), golden);
    assert!(t.passed);
    assert_eq!(t.conservation.turns, 3);
    assert_eq!(t.conservation.journal_lines, 3);
    assert_eq!(t.metrics.as_ref().unwrap().dead_letters, 0);
}

#[test]
fn two_runs_are_identical() {
    let a = run_scenario(&canonical(), &RunOptions::default()).unwrap();
    let b = run_scenario(&canonical(), &RunOptions::default()).unwrap();
    assert_eq!(a.canonical().to_json_pretty(), b.canonical().to_json_pretty());
}

#[test]
fn chaos_run_keeps_business_outcomes() {
    let quiet = run_scenario(&canonical(), &RunOptions::default()).unwrap();
    let options = RunOptions {
        ack_drop: Some(0.3),
        kill_consumer_at: Some(2),
        kill_datanode_at: Some(3),
        ..RunOptions::default()
    };
    let loud = run_scenario(&canonical(), &options).unwrap();
    let replies = |t: &Transcript| t.steps.iter().map(|s| s.reply.clone()).collect::<Vec<_>>();
    assert_eq!(replies(&quiet), replies(&loud));
    assert!(loud.passed);
    assert!(loud.conservation.holds());
    let broker = &loud.metrics.as_ref().unwrap().broker;
    assert!(broker.redelivered > 0, "{broker:?}");
    assert!(broker.dropped_acks > 0);
}

#[test]
fn lowered_oee_reports_non_dispatchable() {
    let t = run_scenario(&Scenario::from_json(NON_DISPATCHABLE).unwrap(), &RunOptions::default()).unwrap();
    assert!(t.passed);
    assert!(t.steps[2].reply.contains("NON_DISPATCHABLE"));
    assert!(t.steps[2].reply.contains("1680"));
}

#[test]
fn failed_expectation_fails_the_run() {
    let mut s = canonical();
    s.steps[1].expect_reply = Some("0\\.99".into());
    let t = run_scenario(&s, &RunOptions::default()).unwrap();
    assert!(!t.passed);
    assert_eq!(t.steps[1].reply_ok, Some(false));
    assert_eq!(t.steps[0].reply_ok, Some(true));
}

#[test]
fn scenario_validation() {
    let mut s = canonical();
    s.steps.clear();
    assert!(matches!(s.validate(), Err(HarnessError::Scenario(_))));
    let mut s = canonical();
    s.chaos.ack_drop_prob = 1.5;
    assert!(s.validate().is_err());
    let mut s = canonical();
    s.chaos.kill_consumer_at_step = Some(4);
    assert!(s.validate().is_err());
    let mut s = canonical();
    s.steps[0].api_body = Some(serde_json::json!({"cmd": "read_oee"}));
    assert!(s.validate().is_err());
    let mut s = canonical();
    s.fixed_clock_start = "yesterday".into();
    assert!(s.validate().is_err());
    let bad = RunOptions {
        ack_drop: Some(-0.1),
        ..RunOptions::default()
    };
    assert!(run_scenario(&canonical(), &bad).is_err());
}

#[test]
fn api_body_passes_through_as_text() {
    let mut s = canonical();
    s.steps.truncate(1);
    s.steps.push(mip_harness::Step {
        channel: "api01".into(),
        utterance: None,
        api_body: Some(serde_json::json!({"cmd": "read_oee"})),
        expect_intent: None,
        expect_reply: None,
    });
    let t = run_scenario(&s, &RunOptions::default()).unwrap();
    assert_eq!(t.steps[1].request, r#"{"cmd":"read_oee"}"#);
    assert_eq!(t.steps[1].modality, "api");
    assert_eq!(t.conservation.replies, 2);
}

#[test]
fn cli_run_writes_transcript_and_reports_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let status = Command::new(env!("CARGO_BIN_EXE_mip"))
        .args(["run", concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/canonical.json"), "--canonical", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let written: Transcript = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(written, serde_json::from_str::<Transcript>(GOLDEN).unwrap());

    let mut s = canonical();
    s.steps[0].expect_reply = Some("^nope$".into());
    let failing = dir.path().join("failing.json");
    std::fs::write(&failing, serde_json::to_string(&s).unwrap()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mip"))
        .args(["run"])
        .arg(&failing)
        .args(["--out"])
        .arg(dir.path().join("f.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
