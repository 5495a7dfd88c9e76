mod common;

use std::fs;
use std::net::TcpListener;

use common::serving::{quick_config, small_service, start, Flaky};
use maestro_core::emulator::{load_scenario, parse_scenario, run, Scenario, ScenarioError, TRANSCRIPT_HEADER};
use maestro_core::music::read_midi;
use maestro_core::server::{serve, WireMessage};
use maestro_core::strategy::active_layer_count;

#[test]
fn hero_journey_loads() {
    let s = Scenario::hero_journey();
    assert!(s.steps.len() >= 8);
    assert!(s.steps.windows(2).all(|w| w[0].at_seconds <= w[1].at_seconds));
    let labels: Vec<&str> = s.steps.iter().map(|st| st.label.as_str()).collect();
    let pos = |l: &str| labels.iter().position(|x| *x == l).unwrap();
    assert!(pos("ordinary_world") < pos("ordeal") && pos("ordeal") < pos("return_to_calm"));
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/hero_journey.jsonl");
    assert_eq!(load_scenario(path).unwrap(), s);
}

#[test]
fn scenario_errors_name_the_line() {
    assert_eq!(parse_scenario("e", ""), Err(ScenarioError::Empty));
    assert_eq!(parse_scenario("e", "# only a comment\n\n"), Err(ScenarioError::Empty));

    let text = r#"{"at": 5, "label": "a", "type": "music_request"}
{"at": 2, "label": "b", "type": "music_request"}"#;
    match parse_scenario("e", text) {
        Err(ScenarioError::OutOfOrder { line, label, .. }) => assert_eq!((line, label.as_str()), (2, "b")),
        other => panic!("{other:?}"),
    }

    for (bad, line) in [
        ("{\"at\": 0, \"label\": \"x\", \"type\": \"dance\"}", 1),
        ("\n{\"label\": \"x\", \"type\": \"music_request\"}", 2),
        ("{\"at\": 0, \"type\": \"music_request\"}", 1),
        ("{\"at\": 0, \"label\": \"../x\", \"type\": \"music_request\"}", 1),
        ("{\"at\": -1, \"label\": \"x\", \"type\": \"music_request\"}", 1),
        ("{\"at\": 0, \"label\": \"x\", \"type\": \"game_event\", \"name\": \"n\"}", 1),
        ("[1, 2]", 1),
        (
            "{\"at\": 0, \"label\": \"x\", \"type\": \"music_request\"}\n{\"at\": 1, \"label\": \"x\", \"type\": \"music_request\"}",
            2,
        ),
    ] {
        match parse_scenario("e", bad) {
            Err(ScenarioError::Line { line: l, .. }) => assert_eq!(l, line, "{bad}"),
            other => panic!("{bad}: {other:?}"),
        }
    }
    assert!(matches!(load_scenario("/definitely/not/here.jsonl"), Err(ScenarioError::Io(_))));
}

#[test]
fn session_is_filled_in() {
    let s = parse_scenario("e", r#"{"at": 0, "label": "a", "type": "music_request"}"#).unwrap();
    let WireMessage::MusicRequest(r) = &s.steps[0].message else { panic!() };
    assert_eq!(r.session, "emulator");
}

#[test]
fn hero_journey_against_a_live_server() {
    let handle = serve(small_service(31), "127.0.0.1:0").unwrap();
    let out = tempfile::tempdir().unwrap();
    let scenario = Scenario::hero_journey();
    let transcript = run(&scenario, &handle.local_addr().to_string(), out.path(), 0.0).unwrap();
    handle.shutdown();

    assert_eq!(transcript.rows.len(), scenario.requests().count());
    assert!(transcript.event_errors.is_empty());
    for row in &transcript.rows {
        assert_eq!(row.error, None, "{}", row.label);
        assert!(!row.strategy.is_empty());
        assert_eq!(row.active_layers, active_layer_count(row.arousal));
        let path = out.path().join(format!("{}.mid", row.label));
        assert_eq!(row.midi_path.as_deref(), Some(path.as_path()));
        let piece = read_midi(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(piece.tracks().len(), row.active_layers);
    }
    let row = |l: &str| transcript.rows.iter().find(|r| r.label == l).unwrap();
    assert_eq!(row("ordeal_music").active_layers, 4);
    assert_eq!(row("return_to_calm_music").active_layers, 1);

    let tsv = fs::read_to_string(out.path().join("transcript.tsv")).unwrap();
    assert_eq!(tsv, transcript.to_string());
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some(TRANSCRIPT_HEADER));
    assert_eq!(lines.count(), transcript.rows.len());
}

#[test]
fn error_replies_are_recorded_and_the_run_continues() {
    let model = Flaky::new(false);
    let service = start(model.clone(), quick_config(32));
    for s in service.cache_status() {
        service.evict(&s.strategy);
    }
    model.set_failing(true);
    let handle = serve(service, "127.0.0.1:0").unwrap();
    let out = tempfile::tempdir().unwrap();
    let scenario = Scenario::hero_journey();
    let transcript = run(&scenario, &handle.local_addr().to_string(), out.path(), 0.0).unwrap();
    handle.shutdown();
    assert_eq!(transcript.rows.len(), scenario.requests().count());
    assert!(transcript.rows.iter().all(|r| r.error.is_some() && r.midi_path.is_none()));
    assert!(transcript.to_string().contains("GenerationFailed"));
}

#[test]
fn unreachable_server_aborts_with_a_partial_transcript() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let out = tempfile::tempdir().unwrap();
    let err = run(&Scenario::hero_journey(), &format!("127.0.0.1:{port}"), out.path(), 0.0).unwrap_err();
    assert!(err.transcript.rows.is_empty());
}
