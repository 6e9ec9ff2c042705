//! End-to-end runs against broker, worker and cloud servers on localhost.

mod common;

use std::time::Duration;

use common::{Stack, ROW1};
use healthfog::client::Gateway;
use healthfog::error::Error;
use healthfog_core::ensemble::Gate;
use healthfog_core::protocol::{self, ErrorBody, Heartbeat, JobAck, QuarantineRequest, Scenario};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-6
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn row_one_goes_to_a_worker() {
    let stack = Stack::start(2, true).await;
    let gw = Gateway::new(stack.broker.url.clone());
    let req = Gateway::request("j1", ROW1, false, false).unwrap();
    let s = gw.submit(&req).await.unwrap();
    assert_eq!(s.ack.decision.scenario, Scenario::Worker);
    assert!(s.ack.response.is_none());
    assert_eq!(s.response.scenario, Scenario::Worker);
    assert!(s.response.handled_by.starts_with("worker-"));
    assert!(s.response.class <= 1);
    assert!(close(s.response.p0 + s.response.p1, 1.0));
    let expected_conf = 100.0 * (2.0 * s.response.p0.max(s.response.p1) - 1.0);
    assert!(close(s.response.confidence, expected_conf));
    let gate = if s.response.confidence >= 50.0 { Gate::Reliable } else { Gate::ConsultDoctor };
    assert_eq!(s.response.gate, gate);
    let t = s.response.timings;
    assert!(t.execution_ms > 0.0);
    assert!(close(t.arbitration_ms + t.comm_ms + t.queuing_ms + t.execution_ms, t.response_ms));
    assert_eq!(s.trace.response_ms, Some(t.response_ms));
    assert!(s.trace.bytes_up > 0 && s.trace.bytes_down > 0);
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ensemble_collects_every_worker() {
    let stack = Stack::start(2, false).await;
    let gw = Gateway::new(stack.broker.url.clone());
    let req = Gateway::request("e1", ROW1, true, false).unwrap();
    let s = gw.submit(&req).await.unwrap();
    assert_eq!(s.response.scenario, Scenario::Worker);
    let votes = s.response.member_votes.clone().expect("ensemble votes");
    assert_eq!(votes.len(), 2);
    assert!(!s.response.partial);
    let ones = votes.iter().filter(|&&v| v == 1).count();
    let majority = if 2 * ones >= votes.len() { 1 } else { 0 };
    assert_eq!(s.response.class, majority);
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn relay_returns_response_in_ack() {
    let stack = Stack::start(2, false).await;
    let mut req = Gateway::request("r1", ROW1, false, false).unwrap();
    req.relay = true;
    let (status, body) = stack.post("/api/job", protocol::encode(&req)).await;
    assert_eq!(status, 200, "{body}");
    let ack: JobAck = protocol::decode(&body).unwrap();
    let resp = ack.response.expect("relayed response");
    assert_eq!(resp.scenario, Scenario::Worker);
    assert_eq!(resp.handled_by, ack.decision.node_id);
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn latency_tolerant_goes_to_cloud() {
    let stack = Stack::start(1, true).await;
    let gw = Gateway::new(stack.broker.url.clone());
    let s = gw.submit(&Gateway::request("c1", ROW1, false, true).unwrap()).await.unwrap();
    assert_eq!(s.ack.decision.scenario, Scenario::Cloud);
    assert_eq!(s.response.scenario, Scenario::Cloud);
    assert_eq!(s.response.handled_by, "cloud");
    assert!(!s.response.fallback);
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn cloud_down_falls_back() {
    let mut stack = Stack::start(1, true).await;
    stack.cloud.take().unwrap().stop().await;
    let gw = Gateway::new(stack.broker.url.clone());
    let s = gw.submit(&Gateway::request("c2", ROW1, false, true).unwrap()).await.unwrap();
    assert!(s.response.fallback);
    assert_ne!(s.response.scenario, Scenario::Cloud);
    assert_ne!(s.ack.decision.scenario, Scenario::Cloud);
    let metrics: serde_json::Value = serde_json::from_str(
        &stack.http.get(format!("{}/api/metrics", stack.broker.url)).send().await.unwrap().text().await.unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["fallbacks"], 1);
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn no_workers_means_broker_only() {
    let stack = Stack::start(0, false).await;
    let gw = Gateway::new(stack.broker.url.clone());
    let s = gw.submit(&Gateway::request("b1", ROW1, false, false).unwrap()).await.unwrap();
    assert_eq!(s.response.scenario, Scenario::BrokerOnly);
    assert_eq!(s.response.handled_by, "broker");
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn nodes_endpoint_lists_workers() {
    let stack = Stack::start(2, false).await;
    let nodes = stack.nodes().await;
    let ids: Vec<&str> = nodes.iter().map(|n| n.node_id.as_str()).collect();
    assert_eq!(ids, ["worker-1", "worker-2"]);
    for n in &nodes {
        assert!(n.live && !n.quarantined);
        assert!(n.address.starts_with("http://127.0.0.1:"));
        assert!((0.0..=1.0).contains(&n.cpu_load));
    }
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn quarantined_worker_gets_no_jobs() {
    let stack = Stack::start(2, false).await;
    let q = QuarantineRequest {
        node_id: "worker-1".into(),
        quarantined: true,
    };
    let (status, _) = stack.post("/api/quarantine", protocol::encode(&q)).await;
    assert_eq!(status, 200);
    assert!(stack.nodes().await.iter().any(|n| n.node_id == "worker-1" && n.quarantined));
    let gw = Gateway::new(stack.broker.url.clone());
    for i in 0..4 {
        let s = gw.submit(&Gateway::request(format!("q{i}"), ROW1, false, false).unwrap()).await.unwrap();
        assert_eq!(s.response.handled_by, "worker-2");
    }
    let unknown = QuarantineRequest {
        node_id: "nobody".into(),
        quarantined: true,
    };
    let (status, _) = stack.post("/api/quarantine", protocol::encode(&unknown)).await;
    assert_eq!(status, 404);
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_input_is_rejected() {
    let stack = Stack::start(1, false).await;
    let twelve = "63,1,3,145,233,1,0,150,0,2.3,0,0";
    assert!(matches!(Gateway::request("x", twelve, false, false), Err(Error::Invalid(_))));

    let mut req = Gateway::request("x", ROW1, false, false).unwrap();
    req.payload = twelve.into();
    let (status, body) = stack.post("/api/job", protocol::encode(&req)).await;
    assert_eq!(status, 400);
    let err: ErrorBody = serde_json::from_str(&body).unwrap();
    assert!(!err.error.is_empty());

    let (status, _) = stack.post("/api/job", "{\"job_id\":\"x\"}".into()).await;
    assert_eq!(status, 400);

    let hb = Heartbeat {
        node_id: "worker-9".into(),
        cpu_load: 1.5,
        queue_depth: 0,
        sent_at: 0,
        address: None,
    };
    let (status, _) = stack.post("/api/heartbeat", protocol::encode(&hb)).await;
    assert_eq!(status, 400);
    assert!(stack.nodes().await.iter().all(|n| n.node_id != "worker-9"));
    stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unreachable_broker_is_network_error() {
    let gw = Gateway::new("http://127.0.0.1:1").with_timeout(Duration::from_secs(2));
    let err = gw.submit(&Gateway::request("n", ROW1, false, false).unwrap()).await.unwrap_err();
    assert!(matches!(err, Error::Network(_)), "{err:?}");
    assert_eq!(err.exit_code(), healthfog::error::EXIT_NETWORK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stale_worker_drops_out() {
    let mut stack = Stack::start(2, false).await;
    stack.workers.pop().unwrap().stop().await;
    // The registry's stale timeout is 3 s.
    let mut gone = false;
    for _ in 0..80 {
        if stack.nodes().await.iter().any(|n| n.node_id == "worker-2" && !n.live) {
            gone = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    assert!(gone);
    let gw = Gateway::new(stack.broker.url.clone());
    let s = gw.submit(&Gateway::request("s", ROW1, false, false).unwrap()).await.unwrap();
    assert_eq!(s.response.handled_by, "worker-1");
    stack.stop().await;
}
