//! Frozen JSON bodies for every wire message. Set `HEALTHFOG_BLESS=1` to
//! rewrite the fixtures after an intentional format change.

mod golden;

use golden::{cases, fixture};
use healthfog_core::protocol::*;

#[test]
fn encodings_match_frozen_fixtures() {
    let bless = std::env::var_os("HEALTHFOG_BLESS").is_some();
    for (name, body, _) in cases() {
        let path = fixture(name);
        if bless {
            std::fs::write(&path, format!("{body}\n")).unwrap();
        }
        let frozen = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(frozen.trim_end(), body, "fixture {name} changed");
    }
}

#[test]
fn fixtures_round_trip() {
    for (name, _, reencode) in cases() {
        let frozen = std::fs::read_to_string(fixture(name)).unwrap();
        assert_eq!(reencode(frozen.trim_end()), frozen.trim_end(), "fixture {name}");
    }
}

#[test]
fn missing_field_is_named() {
    let err = decode::<JobRequest>(r#"{"job_id":"j","ensemble":false,"latency_tolerant":false,"submitted_at":1}"#)
        .unwrap_err();
    assert_eq!(err, ProtocolError::MissingField("payload".into()));
    assert_eq!(err.to_string(), "missing field: payload");
}

#[test]
fn unknown_fields_are_ignored() {
    let hb: Heartbeat = decode(r#"{"node_id":"w","cpu_load":0.5,"queue_depth":0,"sent_at":3,"colour":"red"}"#).unwrap();
    assert_eq!(hb.address(), "w");
}
