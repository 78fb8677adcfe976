use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use guardad_core::guard::{GuardConfig, GuardMode};
use guardad_core::policy::{
    external_handshake, ExternalPolicy, Policy, PolicyError, PolicyRequest, PolicySpec,
    PROTOCOL_VERSION,
};
use guardad_core::rules::default_catalog;
use guardad_core::scene::{Action, Entity, Observation, Region, SignalState};
use guardad_core::sim::{generate_scenarios, run_episode, ScenarioParams, Template};
use serde_json::{json, Value};

const STUB: &str = env!("CARGO_BIN_EXE_guardad-stub-policy");

fn red_light(t: u64) -> Observation {
    Observation::new(
        t,
        vec![
            Entity::ego(),
            Entity::traffic_light("light", Region::FrontCenter, SignalState::Red),
        ],
    )
    .unwrap()
}

#[test]
fn handshake_reports_version() {
    assert_eq!(external_handshake(STUB).unwrap(), PROTOCOL_VERSION);
}

#[test]
fn hundred_round_trips_then_clean_shutdown() {
    let mut policy = ExternalPolicy::launch(STUB, Duration::from_secs(5)).unwrap();
    for t in 0..100 {
        let mut req = PolicyRequest::new(vec![red_light(t)]);
        if t % 2 == 1 {
            req = req.with_prompt(
                "Red light detected. Only actions that stop or decelerate are allowed.",
            );
        }
        let dist = policy.decide(&req).unwrap();
        let expected = if t % 2 == 1 {
            Action::Decelerate
        } else {
            Action::KeepSpeed
        };
        assert_eq!(dist.argmax(), expected, "step {t}");
    }
    policy.shutdown().unwrap();
}

#[test]
fn version_mismatch_is_rejected() {
    let err = ExternalPolicy::launch(
        &format!("{STUB} --announce-version 2"),
        Duration::from_secs(5),
    )
    .err()
    .unwrap();
    assert_eq!(err, PolicyError::VersionMismatch("2".into()));
}

#[test]
fn garbage_output_is_a_protocol_error() {
    let err = ExternalPolicy::launch("echo garbage; sleep 1", Duration::from_secs(5))
        .err()
        .unwrap();
    assert!(matches!(err, PolicyError::Protocol(_)), "{err:?}");
}

#[test]
fn silent_policy_times_out() {
    let mut policy = ExternalPolicy::launch(
        &format!("{STUB} --stall-after 1"),
        Duration::from_millis(300),
    )
    .unwrap();
    policy
        .decide(&PolicyRequest::new(vec![red_light(0)]))
        .unwrap();
    let err = policy
        .decide(&PolicyRequest::new(vec![red_light(1)]))
        .unwrap_err();
    assert_eq!(err, PolicyError::Timeout(Duration::from_millis(300)));
}

#[test]
fn exiting_policy_is_an_error() {
    assert!(ExternalPolicy::launch("exit 0", Duration::from_secs(5)).is_err());
}

/// Speaks to the stub directly to check the raw message shapes.
#[test]
fn stub_speaks_the_documented_schema() {
    let mut child = Command::new(STUB)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut ask = |msg: &str| -> Value {
        writeln!(stdin, "{msg}").unwrap();
        stdin.flush().unwrap();
        serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap()
    };

    let early = ask(&json!({"type": "decide", "history": [red_light(0)]}).to_string());
    assert_eq!(early["type"], "error");
    assert_eq!(
        ask(r#"{"type":"hello","version":"1"}"#),
        json!({"type": "hello", "version": "1"})
    );
    assert_eq!(ask("not json")["type"], "error");
    assert_eq!(ask(r#"{"type":"dance"}"#)["type"], "error");
    assert_eq!(ask(r#"{"type":"decide","history":[]}"#)["type"], "error");

    let reply = ask(&json!({"type": "decide", "history": [red_light(0)], "prompt_suffix": "Please stop or decelerate."}).to_string());
    assert_eq!(reply["type"], "decision");
    let scores = reply["scores"].as_object().unwrap();
    assert_eq!(scores.len(), 8);
    let top = scores
        .iter()
        .max_by(|a, b| a.1.as_f64().unwrap().total_cmp(&b.1.as_f64().unwrap()))
        .unwrap();
    assert_eq!(top.0, "Decelerate");

    writeln!(stdin, r#"{{"type":"shutdown"}}"#).unwrap();
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn external_policy_drives_a_guarded_episode() {
    let cat = default_catalog();
    let scenario = &generate_scenarios(
        Template::RedLightIntersection,
        1,
        6,
        &ScenarioParams::default(),
    )
    .unwrap()[0];
    let spec: PolicySpec = format!("external:{STUB}").parse().unwrap();
    let (trace, outcome) = run_episode(scenario, &spec, &GuardConfig::default(), cat).unwrap();
    assert!(trace.policy_error.is_none());
    assert!(!outcome.accident);
    // The stub ignores the scene, so every red-light step needs the prompt.
    for step in trace.steps.iter().filter(|s| s.delta) {
        assert_eq!(step.final_action, Action::Decelerate);
        assert_eq!(step.retries_used, 1);
    }

    let monitor = GuardConfig::default().with_mode(GuardMode::Monitor);
    let (_, unguarded) = run_episode(scenario, &spec, &monitor, cat).unwrap();
    assert!(unguarded.accident);
}
