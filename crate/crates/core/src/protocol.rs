//! Wire messages exchanged between gateway, broker, workers and cloud.
//!
//! Every message is a compact JSON body carried by an HTTP POST (or a GET
//! response). Unknown fields are ignored on decode. The CSV payload travels
//! verbatim inside the JSON envelope.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Gate, PredictionResult};
use crate::heartdata::{self, PatientRecord, NUM_FEATURES};

pub const EP_JOB: &str = "/api/job";
pub const EP_INFER: &str = "/api/infer";
pub const EP_ENSEMBLE: &str = "/api/ensemble";
pub const EP_ENSEMBLE_REPLY: &str = "/api/ensemble-reply";
pub const EP_HEARTBEAT: &str = "/api/heartbeat";
pub const EP_NODES: &str = "/api/nodes";
pub const EP_METRICS: &str = "/api/metrics";
/// Operator endpoint toggling a node's quarantine flag.
pub const EP_QUARANTINE: &str = "/api/quarantine";
/// Worker endpoint answering the broker's live load probe with a [`Heartbeat`].
pub const EP_LOAD: &str = "/api/load";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid payload: {0}")]
    Payload(#[from] heartdata::DataError),
    #[error("payload has {0} fields, expected 13")]
    PayloadFieldCount(usize),
    #[error("cpu_load {0} outside [0, 1]")]
    CpuLoad(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    BrokerOnly,
    Worker,
    Cloud,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::BrokerOnly, Scenario::Worker, Scenario::Cloud];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BrokerOnly => "BrokerOnly",
            Self::Worker => "Worker",
            Self::Cloud => "Cloud",
        }
    }
}

impl core::fmt::Display for Scenario {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Gateway -> broker job request; the same body carries the data to the
/// assigned node on `/api/infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub job_id: String,
    pub payload: String,
    pub ensemble: bool,
    pub latency_tolerant: bool,
    pub submitted_at: u64,
    /// Ask the broker to deliver the data itself and answer with the result
    /// (used by clients that can only reach the broker).
    #[serde(default, skip_serializing_if = "is_false")]
    pub relay: bool,
}

impl JobRequest {
    pub fn record(&self) -> Result<PatientRecord, ProtocolError> {
        parse_payload(&self.payload)
    }
}

/// Parses a job payload: exactly 13 comma-separated numeric features.
pub fn parse_payload(payload: &str) -> Result<PatientRecord, ProtocolError> {
    let trimmed = payload.trim();
    let n = if trimmed.is_empty() { 0 } else { trimmed.split(',').count() };
    if n != NUM_FEATURES {
        return Err(ProtocolError::PayloadFieldCount(n));
    }
    Ok(heartdata::parse_line(trimmed, 1)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub node_id: String,
    pub cpu_load: f64,
    pub queue_depth: u32,
    pub sent_at: u64,
    /// Base URL of the node; defaults to `node_id` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

impl Heartbeat {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if (0.0..=1.0).contains(&self.cpu_load) {
            Ok(())
        } else {
            Err(ProtocolError::CpuLoad(self.cpu_load))
        }
    }

    pub fn address(&self) -> &str {
        self.address.as_deref().unwrap_or(&self.node_id)
    }
}

/// Where the broker placed a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationDecision {
    pub scenario: Scenario,
    /// Node id of the node that will run the job.
    pub node_id: String,
    /// Address the gateway sends the data to (the broker for BrokerOnly and Cloud).
    pub target: String,
    pub ensemble: bool,
    pub decided_at: u64,
}

/// Broker reply to `/api/job`. `response` is filled when the broker already
/// produced the result (BrokerOnly, Cloud, or a relayed request).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAck {
    pub job_id: String,
    pub decision: ArbitrationDecision,
    pub arbitration_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<JobResponse>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub arbitration_ms: f64,
    pub comm_ms: f64,
    pub queuing_ms: f64,
    pub execution_ms: f64,
    pub response_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResponse {
    pub job_id: String,
    pub class: u8,
    pub p0: f64,
    pub p1: f64,
    pub confidence: f64,
    pub gate: Gate,
    pub handled_by: String,
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_votes: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub partial: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub fallback: bool,
    pub timings: Timings,
}

impl JobResponse {
    pub fn from_prediction(
        job_id: &str,
        result: &PredictionResult,
        threshold: f64,
        handled_by: &str,
        scenario: Scenario,
    ) -> Self {
        Self {
            job_id: job_id.to_string(),
            class: result.class,
            p0: result.p0,
            p1: result.p1,
            confidence: result.confidence,
            gate: result.gate(threshold),
            handled_by: handled_by.to_string(),
            scenario,
            member_votes: result.member_votes.clone(),
            partial: false,
            fallback: false,
            timings: Timings::default(),
        }
    }
}

/// Origin worker -> peer: run this payload and reply to `reply_to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFanout {
    pub job_id: String,
    pub payload: String,
    pub origin: String,
    pub reply_to: String,
    pub destination: String,
}

/// Peer -> origin worker: the peer's class probabilities for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReply {
    pub job_id: String,
    pub node_id: String,
    pub p0: f64,
    pub p1: f64,
    pub queuing_ms: f64,
    pub execution_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub node_id: String,
    pub address: String,
    pub cpu_load: f64,
    pub queue_depth: u32,
    pub last_seen: u64,
    pub live: bool,
    pub quarantined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRequest {
    pub node_id: String,
    pub quarantined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Validation run after structural decoding.
pub trait Message: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), ProtocolError> {
        Ok(())
    }
}

impl Message for JobRequest {
    fn check(&self) -> Result<(), ProtocolError> {
        self.record().map(|_| ())
    }
}

impl Message for EnsembleFanout {
    fn check(&self) -> Result<(), ProtocolError> {
        parse_payload(&self.payload).map(|_| ())
    }
}

impl Message for Heartbeat {}
impl Message for ArbitrationDecision {}
impl Message for JobAck {}
impl Message for JobResponse {}
impl Message for EnsembleReply {}
impl Message for NodeInfo {}
impl Message for QuarantineRequest {}
impl Message for ErrorBody {}
impl Message for Vec<NodeInfo> {}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("protocol messages always serialize")
}

/// Exact size in bytes of the encoded body.
pub fn encoded_len<T: Serialize>(msg: &T) -> usize {
    encode(msg).len()
}

pub fn decode<T: Message>(body: &str) -> Result<T, ProtocolError> {
    let msg: T = serde_json::from_str(body).map_err(map_json_error)?;
    msg.check()?;
    Ok(msg)
}

pub fn decode_bytes<T: Message>(body: &[u8]) -> Result<T, ProtocolError> {
    let text = core::str::from_utf8(body)
        .map_err(|_| ProtocolError::Malformed("body is not UTF-8".into()))?;
    decode(text)
}

fn map_json_error(err: serde_json::Error) -> ProtocolError {
    let text = err.to_string();
    if let Some(rest) = text.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return ProtocolError::MissingField(rest[..end].to_string());
        }
    }
    ProtocolError::Malformed(text)
}

/// One fanout frame per peer, each carrying the origin's reply address.
pub fn multicast_frame(
    job_id: &str,
    payload: &str,
    origin: &str,
    reply_to: &str,
    peers: &[String],
) -> Vec<EnsembleFanout> {
    peers
        .iter()
        .filter(|p| p.as_str() != origin && p.as_str() != reply_to)
        .map(|dest| EnsembleFanout {
            job_id: job_id.to_string(),
            payload: payload.to_string(),
            origin: origin.to_string(),
            reply_to: reply_to.to_string(),
            destination: dest.clone(),
        })
        .collect()
}

/// Formats a record as a 13-field payload (any label is dropped).
pub fn payload_for(record: &PatientRecord) -> String {
    let mut r = *record;
    r.label = None;
    r.to_csv_line()
}

pub fn error_body(msg: impl core::fmt::Display) -> String {
    encode(&ErrorBody {
        error: format!("{msg}"),
    })
}
