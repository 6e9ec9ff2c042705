//! Canonical instances of every wire message and their frozen fixture files.

use std::path::PathBuf;

use healthfog_core::ensemble::Gate;
use healthfog_core::protocol::*;

fn decision() -> ArbitrationDecision {
    ArbitrationDecision {
        scenario: Scenario::Worker,
        node_id: "worker-1".into(),
        target: "http://127.0.0.1:7101".into(),
        ensemble: true,
        decided_at: 1_700_000_000_123,
    }
}

fn response() -> JobResponse {
    JobResponse {
        job_id: "job-000001".into(),
        class: 1,
        p0: 0.25,
        p1: 0.75,
        confidence: 50.0,
        gate: Gate::Reliable,
        handled_by: "worker-1".into(),
        scenario: Scenario::Worker,
        member_votes: Some(vec![1, 1, 0]),
        partial: true,
        fallback: false,
        timings: Timings {
            arbitration_ms: 5.0,
            comm_ms: 8.5,
            queuing_ms: 0.0,
            execution_ms: 50.0,
            response_ms: 63.5,
        },
    }
}

/// (fixture name, encoded body, decode-and-reencode of that body)
pub type Case = (&'static str, String, fn(&str) -> String);

pub fn cases() -> Vec<Case> {
    fn re<T: Message>(s: &str) -> String {
        encode(&decode::<T>(s).unwrap())
    }
    vec![
        (
            "job_request",
            encode(&JobRequest {
                job_id: "job-000001".into(),
                payload: "63,1,3,145,233,1,0,150,0,2.3,0,0,1".into(),
                ensemble: false,
                latency_tolerant: false,
                submitted_at: 1_700_000_000_000,
                relay: false,
            }),
            re::<JobRequest>,
        ),
        (
            "heartbeat",
            encode(&Heartbeat {
                node_id: "worker-2".into(),
                cpu_load: 0.35,
                queue_depth: 2,
                sent_at: 1_700_000_000_500,
                address: Some("http://127.0.0.1:7102".into()),
            }),
            re::<Heartbeat>,
        ),
        ("arbitration_decision", encode(&decision()), re::<ArbitrationDecision>),
        (
            "job_ack",
            encode(&JobAck {
                job_id: "job-000001".into(),
                decision: decision(),
                arbitration_ms: 5.0,
                response: None,
            }),
            re::<JobAck>,
        ),
        ("job_response", encode(&response()), re::<JobResponse>),
        (
            "ensemble_fanout",
            encode(&EnsembleFanout {
                job_id: "job-000001".into(),
                payload: "63,1,3,145,233,1,0,150,0,2.3,0,0,1".into(),
                origin: "worker-1".into(),
                reply_to: "http://127.0.0.1:7101".into(),
                destination: "worker-2".into(),
            }),
            re::<EnsembleFanout>,
        ),
        (
            "ensemble_reply",
            encode(&EnsembleReply {
                job_id: "job-000001".into(),
                node_id: "worker-2".into(),
                p0: 0.125,
                p1: 0.875,
                queuing_ms: 1.5,
                execution_ms: 50.0,
            }),
            re::<EnsembleReply>,
        ),
        (
            "nodes",
            encode(&vec![NodeInfo {
                node_id: "worker-1".into(),
                address: "http://127.0.0.1:7101".into(),
                cpu_load: 0.2,
                queue_depth: 0,
                last_seen: 1_700_000_000_500,
                live: true,
                quarantined: false,
            }]),
            re::<Vec<NodeInfo>>,
        ),
        (
            "quarantine",
            encode(&QuarantineRequest {
                node_id: "worker-3".into(),
                quarantined: true,
            }),
            re::<QuarantineRequest>,
        ),
        ("error", error_body("missing field: payload"), re::<ErrorBody>),
    ]
}

pub fn fixture(name: &str) -> PathBuf {
    // Resolved from the workspace root so other crates' tests can share it.
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../crates/core/tests/fixtures").join(format!("{name}.json"))
}
