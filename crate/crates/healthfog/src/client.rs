//! Gateway side: submit a job to the broker, follow the decision, and time
//! the whole exchange.

use std::time::{Duration, Instant};

use healthfog_core::metrics::{JobTrace, NodeClass};
use healthfog_core::protocol::{self, JobAck, JobRequest, JobResponse, Scenario, EP_INFER, EP_JOB};

use crate::error::{Error, Result};
use crate::node::{join_url, now_ms, post_json, RemoteError};

pub const GATEWAY_NODE: &str = "gateway";

#[derive(Debug, Clone)]
pub struct Submission {
    pub ack: JobAck,
    pub response: JobResponse,
    pub trace: JobTrace,
}

pub struct Gateway {
    http: reqwest::Client,
    broker: String,
    timeout: Duration,
}

fn remote(e: RemoteError) -> Error {
    match e {
        RemoteError::Status { status: 400, message } => Error::Invalid(message),
        RemoteError::Status { status, message } => Error::Network(format!("remote error {status}: {message}")),
        other => Error::Network(other.to_string()),
    }
}

impl Gateway {
    pub fn new(broker: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            broker: broker.into(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// A request for `payload`, validated locally before anything is sent.
    pub fn request(job_id: impl Into<String>, payload: &str, ensemble: bool, latency_tolerant: bool) -> Result<JobRequest> {
        protocol::parse_payload(payload).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(JobRequest {
            job_id: job_id.into(),
            payload: payload.trim().to_string(),
            ensemble,
            latency_tolerant,
            submitted_at: now_ms(),
            relay: false,
        })
    }

    /// Sends the request to the broker and, when told to, the data to the
    /// assigned worker. The trace's comm span is what remains of the
    /// gateway-measured response time after the reported spans.
    pub async fn submit(&self, request: &JobRequest) -> Result<Submission> {
        protocol::parse_payload(&request.payload).map_err(|e| Error::Invalid(e.to_string()))?;
        let start = Instant::now();
        let submitted_at_ms = now_ms() as f64;
        let body = protocol::encode(request);
        let mut bytes_up = body.len() as u64;
        let (ack, ack_len) = post_json::<JobAck>(&self.http, &join_url(&self.broker, EP_JOB), body, Some(self.timeout))
            .await
            .map_err(remote)?;
        let mut bytes_down = ack_len as u64;
        // (node, class, bytes it received, bytes it sent)
        let mut nodes: Vec<(String, NodeClass, u64, u64)> = vec![("broker".into(), NodeClass::Broker, bytes_up, ack_len as u64)];
        let response = match ack.response.clone() {
            Some(r) => r,
            None => {
                let data = JobRequest {
                    ensemble: ack.decision.ensemble,
                    relay: false,
                    ..request.clone()
                };
                let body = protocol::encode(&data);
                let up = body.len() as u64;
                bytes_up += up;
                let url = join_url(&ack.decision.target, EP_INFER);
                let (resp, len) = post_json::<JobResponse>(&self.http, &url, body, Some(self.timeout))
                    .await
                    .map_err(remote)?;
                bytes_down += len as u64;
                nodes.push((ack.decision.node_id.clone(), NodeClass::Worker, up, len as u64));
                resp
            }
        };
        let response_ms = start.elapsed().as_secs_f64() * 1000.0;
        let mut response = response;
        let t = &mut response.timings;
        t.arbitration_ms = ack.arbitration_ms;
        t.response_ms = response_ms;
        t.comm_ms = (response_ms - t.arbitration_ms - t.queuing_ms - t.execution_ms).max(0.0);
        let mut trace = JobTrace::new(request.job_id.clone(), response.scenario, submitted_at_ms);
        trace.ensemble = ack.decision.ensemble;
        trace.partial = response.partial;
        trace.arbitration_ms = Some(t.arbitration_ms);
        trace.comm_ms = Some(t.comm_ms);
        trace.queuing_ms = Some(t.queuing_ms);
        trace.execution_ms = Some(t.execution_ms);
        trace.response_ms = Some(response_ms);
        trace.bytes_up = bytes_up;
        trace.bytes_down = bytes_down;
        let gateway = trace.usage_mut(GATEWAY_NODE, NodeClass::Gateway);
        gateway.bytes_sent = bytes_up;
        gateway.bytes_received = bytes_down;
        for (id, class, recv, sent) in nodes {
            let u = trace.usage_mut(&id, class);
            u.bytes_received += recv;
            u.bytes_sent += sent;
        }
        let handler_class = match response.scenario {
            Scenario::Worker => NodeClass::Worker,
            Scenario::BrokerOnly => NodeClass::Broker,
            Scenario::Cloud => NodeClass::Cloud,
        };
        trace.usage_mut(&response.handled_by, handler_class).busy_ms += t.execution_ms;
        Ok(Submission { ack, response, trace })
    }
}

/// Terminal summary of one response.
pub fn describe(resp: &JobResponse) -> String {
    let verdict = if resp.class == 1 { "heart disease" } else { "no heart disease" };
    let gate = match resp.gate {
        healthfog_core::ensemble::Gate::Reliable => "reliable",
        healthfog_core::ensemble::Gate::ConsultDoctor => "consult a doctor",
    };
    let mut out = format!(
        "job {}: class {} ({verdict}), confidence {:.1}% [{gate}]\nhandled by {} ({})",
        resp.job_id,
        resp.class,
        resp.confidence,
        resp.handled_by,
        resp.scenario.as_str()
    );
    if let Some(v) = &resp.member_votes {
        out += &format!(", votes {v:?}");
    }
    if resp.partial {
        out += ", partial vote";
    }
    if resp.fallback {
        out += ", fallback";
    }
    let t = &resp.timings;
    out += &format!(
        "\narbitration {:.2} ms, comm {:.2} ms, queue {:.2} ms, exec {:.2} ms, response {:.2} ms",
        t.arbitration_ms, t.comm_ms, t.queuing_ms, t.execution_ms, t.response_ms
    );
    out
}
