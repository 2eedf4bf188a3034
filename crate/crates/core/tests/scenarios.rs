use std::path::PathBuf;

use duplex_core::protocol::{OutputChannel, ServerMessage, SessionState, StreamChecker};
use duplex_core::scenario::{run_scenario, RunOptions, Scenario, ScenarioOutcome};
use duplex_core::scheduler::Effect;
use duplex_core::session::SessionSettings;

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(name: &str) -> ScenarioOutcome {
    let dir = scenarios_dir();
    let scenario = Scenario::load(&dir.join(name)).unwrap();
    let options = RunOptions {
        base_dir: dir,
        force_virtual: true,
        trace_path: None,
    };
    run_scenario(&scenario, &SessionSettings::default(), &options).unwrap()
}

#[test]
fn bundled_scenarios_meet_expectations() {
    for name in [
        "single_query.json",
        "barge_in.json",
        "text_interrupt.json",
        "noise_only.json",
    ] {
        let outcome = run(name);
        assert!(outcome.report.passed(), "{name}: {:?}", outcome.report);
        assert_eq!(outcome.report.faults, 0, "{name}");
        assert_eq!(outcome.report.backend_violations, 0, "{name}");
        StreamChecker::check_stream(&outcome.messages).unwrap();
    }
}

#[test]
fn single_query_report() {
    let outcome = run("single_query.json");
    let report = &outcome.report;
    assert_eq!(
        (report.answered, report.suppressed, report.interrupts),
        (1, 0, 0)
    );
    // a spoken query is answered on the speech channel
    assert!(outcome.messages.iter().any(|m| matches!(
        m,
        ServerMessage::StateEvent {
            state: SessionState::Generating,
            channel: Some(OutputChannel::Speech),
            ..
        }
    )));
}

#[test]
fn barge_in_orders_cancel_consolidate_swap() {
    let outcome = run("barge_in.json");
    let report = &outcome.report;
    assert_eq!(
        (report.answered, report.suppressed, report.interrupts),
        (2, 1, 1)
    );
    let record = outcome
        .trace
        .iter()
        .find(|r| r.effects.iter().any(|e| matches!(e, Effect::Swap { .. })))
        .unwrap();
    let order: Vec<&str> = record
        .effects
        .iter()
        .filter_map(|e| match e {
            Effect::Cancel { .. } => Some("cancel"),
            Effect::Consolidate { .. } => Some("consolidate"),
            Effect::Swap { .. } => Some("swap"),
            _ => None,
        })
        .collect();
    assert_eq!(&order[..3], ["cancel", "consolidate", "swap"]);
    // the interrupted answer's tokens stop at the interrupted event
    let interrupted_at = outcome
        .messages
        .iter()
        .position(|m| {
            matches!(
                m,
                ServerMessage::StateEvent {
                    state: SessionState::Interrupted,
                    ..
                }
            )
        })
        .unwrap();
    let first_turn = report.answered_turn_ids[0];
    assert!(!outcome.messages[interrupted_at..].iter().any(
        |m| matches!(m, ServerMessage::AnswerToken { turn_id, .. } if *turn_id == first_turn)
    ));
}

#[test]
fn virtual_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::load(&scenarios_dir().join("barge_in.json")).unwrap();
    let mut traces = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("t{i}.jsonl"));
        let options = RunOptions {
            base_dir: scenarios_dir(),
            force_virtual: false,
            trace_path: Some(path.clone()),
        };
        run_scenario(&scenario, &SessionSettings::default(), &options).unwrap();
        traces.push(std::fs::read(&path).unwrap());
    }
    assert!(!traces[0].is_empty());
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn unmet_expectation_is_reported() {
    let mut scenario = Scenario::load(&scenarios_dir().join("single_query.json")).unwrap();
    scenario.expectations.answered = Some(3);
    let outcome = run_scenario(
        &scenario,
        &SessionSettings::default(),
        &RunOptions {
            base_dir: scenarios_dir(),
            force_virtual: true,
            trace_path: None,
        },
    )
    .unwrap();
    assert!(!outcome.report.passed());
    assert_eq!(
        outcome.report.failures,
        vec!["answered: expected 3, observed 1"]
    );
}

#[test]
fn unlabeled_utterance_is_rejected_up_front() {
    let err = Scenario::from_json(
        r#"{"name":"x","timeline":[{"at":0,"type":"audio","utterance":"nope"}]}"#,
    )
    .unwrap_err();
    assert!(err.to_string().contains("no label"), "{err}");
    let err = Scenario::from_json(
        r#"{"name":"x","timeline":[{"at":1,"type":"noise","utterance":"a"},{"at":0,"type":"noise","utterance":"b"}]}"#,
    )
    .unwrap_err();
    assert!(err.to_string().contains("sorted"));
}

#[test]
fn audio_file_entries_are_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let pcm = duplex_core::pcm::sine(300.0, 0.7, 16_000, 0.4);
    std::fs::write(
        dir.path().join("q.raw"),
        duplex_core::pcm::encode_s16le(&pcm),
    )
    .unwrap();
    let scenario = Scenario::from_json(
        r#"{"name":"file","timeline":[{"at":0.2,"type":"audio","utterance":"q","file":"q.raw"}],
            "labels":{"q":{"state_token":"<1>","answer":"ok"}},
            "expectations":{"answered":1,"completed":1}}"#,
    )
    .unwrap();
    let outcome = run_scenario(
        &scenario,
        &SessionSettings::default(),
        &RunOptions {
            base_dir: dir.path().to_path_buf(),
            force_virtual: true,
            trace_path: None,
        },
    )
    .unwrap();
    assert!(outcome.report.passed(), "{:?}", outcome.report);
}
