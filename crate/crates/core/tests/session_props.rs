mod support;

use std::fs;

use kgnav_core::pipeline::EngineError;
use kgnav_core::session::{
    events_from_jsonl, events_to_jsonl, recover, replay, EventPayload, FileStore, MemoryStore, SessionError,
    SessionEvent, SessionState, SessionStore, StepOutcome, StoreError,
};
use support::*;

fn case3_log() -> String {
    fs::read_to_string(fixtures().join("case3.log")).unwrap()
}

#[test]
fn engine_log_matches_the_recorded_case() {
    let engine = replay_engine();
    run_case3(&engine, "case3");
    assert_eq!(events_to_jsonl(&engine.events("case3").unwrap()), case3_log());
}

#[test]
fn folding_live_equals_replaying_the_log() {
    let engine = replay_engine();
    run_case3(&engine, "case3");
    let live = engine.state("case3").unwrap();
    let events = engine.events("case3").unwrap();
    let replayed = replay("case3", &events, engine.graph()).unwrap();
    assert_eq!(live.to_json(), replayed.to_json());
    assert_eq!(live.last_sequence, events.last().unwrap().sequence);
}

#[test]
fn every_prefix_replays_and_progress_never_drops() {
    let g = fixture_graph();
    let (events, warnings) = events_from_jsonl("case3", &case3_log()).unwrap();
    assert!(warnings.is_empty());
    let mut last = 0.0;
    for n in 0..=events.len() {
        let state = replay("case3", &events[..n], &g).unwrap();
        assert!(state.progress() >= last, "prefix {n}");
        last = state.progress();
        for w in state.steps.windows(2) {
            assert!(w[1].progress >= w[0].progress);
        }
    }
}

#[test]
fn sequence_gaps_are_rejected_without_side_effects() {
    let g = fixture_graph();
    let (events, _) = events_from_jsonl("case3", &case3_log()).unwrap();
    let mut state = replay("case3", &events[..3], &g).unwrap();
    let before = state.clone();
    let err = state.apply(&events[4], &g).unwrap_err();
    assert!(matches!(err, SessionError::SequenceGap { expected: 4, got: 5 }));
    assert_eq!(state, before);
    assert!(state.apply(&events[1], &g).is_err());
    assert_eq!(state, before);
}

#[test]
fn out_of_order_payloads_are_rejected() {
    let g = fixture_graph();
    let mut state = SessionState::new("s");
    let ev = |sequence, payload| SessionEvent { sequence, timestamp: 0, payload };
    let err = state.apply(&ev(1, EventPayload::LlmResponse { raw: "x".into() }), &g).unwrap_err();
    assert!(matches!(err, SessionError::NoPendingQuery(_)));
    assert_eq!(state, SessionState::new("s"));
    let err = state.apply(&ev(1, EventPayload::Navigation { step: 0 }), &g).unwrap_err();
    assert!(matches!(err, SessionError::StepOutOfRange { step: 0, steps: 0 }));
}

#[test]
fn view_at_step_one_of_case_three() {
    let engine = replay_engine();
    run_case3(&engine, "case3");
    let state = engine.state("case3").unwrap();
    assert_eq!(state.steps.len(), 3);
    let ad = id_of(engine.graph(), "Alzheimer's Disease");
    let omega = id_of(engine.graph(), "Omega-3 fatty acids");
    let neuro = id_of(engine.graph(), "Neurodegenerative Disorders");
    let antiox = id_of(engine.graph(), "Antioxidant properties");

    let view = state.view_at_step(1).unwrap();
    // Mentioned again at step 1 but first introduced at step 0.
    assert!(view.faded.nodes.contains(&ad));
    assert!(view.faded.nodes.contains(&omega));
    assert!(view.highlighted.nodes.contains(&neuro));
    assert!(view.hidden.nodes.contains(&antiox));
    assert!(!view.highlighted.nodes.contains(&ad));

    let all_nodes = view.highlighted.nodes.len() + view.faded.nodes.len() + view.hidden.nodes.len();
    assert_eq!(all_nodes, state.graph.nodes.len());
    let all_edges = view.highlighted.edges.len() + view.faded.edges.len() + view.hidden.edges.len();
    assert_eq!(all_edges, state.graph.edges.len());
    for edge in state.graph.edges.values() {
        assert!(state.graph.nodes.contains_key(&edge.source) && state.graph.nodes.contains_key(&edge.target));
    }

    let last = state.view_at_step(2).unwrap();
    assert!(last.hidden.nodes.is_empty() && last.hidden.edges.is_empty());
    assert!(matches!(state.view_at_step(3), Err(SessionError::StepOutOfRange { step: 3, steps: 3 })));
}

#[test]
fn file_store_round_trip_across_engines() {
    let dir = tempfile::tempdir().unwrap();
    let first = replay_engine_with(grounder(), Box::new(FileStore::open(dir.path()).unwrap()));
    run_case3(&first, "walk");
    let expected = first.state("walk").unwrap();
    drop(first);

    let store = FileStore::open(dir.path()).unwrap();
    assert!(store.snapshot_path("walk").exists() && store.log_path("walk").exists());
    let loaded = store.load("walk", &fixture_graph()).unwrap();
    assert!(loaded.warnings.is_empty(), "{:?}", loaded.warnings);
    assert_eq!(loaded.session.state, expected);

    let second = replay_engine_with(grounder(), Box::new(FileStore::open(dir.path()).unwrap()));
    assert_eq!(second.state("walk").unwrap(), expected);
    assert!(matches!(second.create_session("walk"), Err(EngineError::SessionExists(_))));
}

#[test]
fn corrupt_snapshot_is_rebuilt_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let engine = replay_engine_with(grounder(), Box::new(FileStore::open(dir.path()).unwrap()));
    run_case3(&engine, "walk");
    let expected = engine.state("walk").unwrap();

    let store = FileStore::open(dir.path()).unwrap();
    for bad in ["{ not json", "{\"schema_version\": 99}", ""] {
        fs::write(store.snapshot_path("walk"), bad).unwrap();
        let loaded = store.load("walk", engine.graph()).unwrap();
        assert_eq!(loaded.warnings.len(), 1, "{bad:?}");
        assert!(loaded.warnings[0].contains("rebuilt from event log"));
        assert_eq!(loaded.session.state, expected);
    }

    fs::remove_file(store.snapshot_path("walk")).unwrap();
    let loaded = store.load("walk", engine.graph()).unwrap();
    assert_eq!(loaded.session.state, expected);
    assert_eq!(loaded.warnings.len(), 1);
}

#[test]
fn stale_snapshot_is_not_trusted() {
    let g = fixture_graph();
    let log = case3_log();
    let (events, _) = events_from_jsonl("case3", &log).unwrap();
    let old = replay("case3", &events[..events.len() - 2], &g).unwrap();
    let loaded = recover("case3", Some(&old.to_json()), &log, &g).unwrap();
    assert_eq!(loaded.warnings.len(), 1);
    assert_eq!(loaded.session.state, replay("case3", &events, &g).unwrap());

    let store = MemoryStore::new();
    store.put_raw_snapshot("other", &replay("case3", &events, &g).unwrap().to_json());
    for e in &events {
        store.append_event("other", e).unwrap();
    }
    // Snapshot claims a different session id.
    assert_eq!(store.load("other", &g).unwrap().warnings.len(), 1);
}

#[test]
fn torn_final_line_is_dropped_but_damage_elsewhere_is_fatal() {
    let g = fixture_graph();
    let log = case3_log();
    let (events, _) = events_from_jsonl("case3", &log).unwrap();

    let torn = format!("{log}{{\"sequence\": 99, \"timest");
    let loaded = recover("case3", None, &torn, &g).unwrap();
    assert_eq!(loaded.session.events, events);
    assert_eq!(loaded.warnings.len(), 2);

    let mut lines: Vec<&str> = log.lines().collect();
    lines[2] = "garbage";
    let broken = lines.join("\n") + "\n";
    assert!(matches!(events_from_jsonl("case3", &broken), Err(StoreError::CorruptRecord { .. })));
}

#[test]
fn unknown_and_malformed_session_ids() {
    let dir = tempfile::tempdir().unwrap();
    let store = FileStore::open(dir.path()).unwrap();
    let g = fixture_graph();
    assert!(matches!(store.load("nobody", &g), Err(StoreError::UnknownSession(_))));
    assert!(matches!(store.load("../etc/passwd", &g), Err(StoreError::UnknownSession(_))));
    assert!(!store.exists("nobody").unwrap());
    assert!(matches!(MemoryStore::new().load("nobody", &g), Err(StoreError::UnknownSession(_))));

    let engine = replay_engine();
    assert!(matches!(engine.state("nobody"), Err(EngineError::UnknownSession(_))));
}

#[test]
fn navigation_and_dismissal_are_logged() {
    let engine = replay_engine();
    run_case3(&engine, "walk");
    let view = engine.navigate("walk", 0).unwrap();
    assert_eq!(view.step, 0);
    let recs = engine.recommendations("walk", 3).unwrap();
    let before = engine.progress("walk").unwrap();
    let (after_recs, report) = engine.dismiss("walk", &recs[0].id).unwrap();
    assert!(after_recs.iter().all(|r| r.id != recs[0].id));
    assert_eq!(report.dismissed, before.dismissed + 1);
    assert!(report.progress >= before.progress);

    let state = engine.state("walk").unwrap();
    assert_eq!(state.current_step, Some(0));
    let kinds: Vec<&str> = engine.events("walk").unwrap().iter().rev().take(2).map(|e| e.payload.kind()).collect();
    assert_eq!(kinds, ["dismissal", "navigation"]);
    let replayed = replay("walk", &engine.events("walk").unwrap(), engine.graph()).unwrap();
    assert_eq!(replayed, state);
    assert!(state.steps.iter().all(|s| s.outcome == StepOutcome::Grounded));
}
