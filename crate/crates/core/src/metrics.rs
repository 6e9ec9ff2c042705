//! QoS quantities computed from per-job traces: latency, jitter, bandwidth
//! and modeled energy.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::protocol::Scenario;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("trace {job_id} is missing spans: {missing:?}")]
    Incomplete {
        job_id: String,
        missing: Vec<&'static str>,
    },
    #[error("jitter needs at least 2 response times, got {0}")]
    TooFewSamples(usize),
    #[error("node {node} busy for {busy_ms} ms within a {horizon_ms} ms horizon")]
    BusyExceedsHorizon {
        node: String,
        busy_ms: f64,
        horizon_ms: f64,
    },
    #[error("invalid power profile for {0}: need busy_watts >= idle_watts >= 0")]
    BadPowerProfile(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeClass {
    Gateway,
    Broker,
    Worker,
    Cloud,
}

/// One node's share of a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeUsage {
    pub node_id: String,
    pub class: NodeClass,
    pub busy_ms: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Timing decomposition and byte counts of one job.
///
/// `response_ms` is measured at the gateway from submission to result and
/// includes the arbitration round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTrace {
    pub job_id: String,
    pub scenario: Scenario,
    pub ensemble: bool,
    #[serde(default)]
    pub partial: bool,
    pub submitted_at_ms: f64,
    pub arbitration_ms: Option<f64>,
    pub comm_ms: Option<f64>,
    pub queuing_ms: Option<f64>,
    pub execution_ms: Option<f64>,
    pub response_ms: Option<f64>,
    /// Bytes of frames travelling towards the executing nodes.
    pub bytes_up: u64,
    /// Bytes of frames travelling back towards the gateway.
    pub bytes_down: u64,
    pub nodes: Vec<NodeUsage>,
}

impl JobTrace {
    pub fn new(job_id: impl Into<String>, scenario: Scenario, submitted_at_ms: f64) -> Self {
        Self {
            job_id: job_id.into(),
            scenario,
            ensemble: false,
            partial: false,
            submitted_at_ms,
            arbitration_ms: None,
            comm_ms: None,
            queuing_ms: None,
            execution_ms: None,
            response_ms: None,
            bytes_up: 0,
            bytes_down: 0,
            nodes: Vec::new(),
        }
    }

    fn missing(&self) -> Vec<&'static str> {
        let spans = [
            ("arbitration_ms", self.arbitration_ms),
            ("comm_ms", self.comm_ms),
            ("queuing_ms", self.queuing_ms),
            ("execution_ms", self.execution_ms),
            ("response_ms", self.response_ms),
        ];
        spans
            .iter()
            .filter(|(_, v)| v.is_none())
            .map(|(n, _)| *n)
            .collect()
    }

    fn require(&self, names: &[&'static str]) -> Result<(), MetricsError> {
        let missing: Vec<&'static str> = self
            .missing()
            .into_iter()
            .filter(|m| names.contains(m))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(MetricsError::Incomplete {
                job_id: self.job_id.clone(),
                missing,
            })
        }
    }

    /// Adds bytes and busy time to the usage entry of `node_id`, creating it if needed.
    pub fn usage_mut(&mut self, node_id: &str, class: NodeClass) -> &mut NodeUsage {
        let pos = match self.nodes.iter().position(|n| n.node_id == node_id) {
            Some(p) => p,
            None => {
                self.nodes.push(NodeUsage {
                    node_id: node_id.into(),
                    class,
                    busy_ms: 0.0,
                    bytes_sent: 0,
                    bytes_received: 0,
                });
                self.nodes.len() - 1
            }
        };
        &mut self.nodes[pos]
    }

    /// `response_ms >= arbitration + comm + queuing + execution - eps`.
    pub fn is_consistent(&self, eps: f64) -> bool {
        match (
            self.arbitration_ms,
            self.comm_ms,
            self.queuing_ms,
            self.execution_ms,
            self.response_ms,
        ) {
            (Some(a), Some(c), Some(q), Some(e), Some(r)) => {
                a >= 0.0 && c >= 0.0 && q >= 0.0 && e >= 0.0 && r >= a + c + q + e - eps
            }
            _ => false,
        }
    }
}

/// Communication time plus queuing delay.
pub fn latency(trace: &JobTrace) -> Result<f64, MetricsError> {
    trace.require(&["comm_ms", "queuing_ms"])?;
    Ok(trace.comm_ms.unwrap_or_default() + trace.queuing_ms.unwrap_or_default())
}

/// Mean absolute difference between consecutive response times.
pub fn jitter(response_times: &[f64]) -> Result<f64, MetricsError> {
    if response_times.len() < 2 {
        return Err(MetricsError::TooFewSamples(response_times.len()));
    }
    let sum: f64 = response_times
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .sum();
    Ok(sum / (response_times.len() - 1) as f64)
}

/// Half-open time window `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl Window {
    pub const ALL: Window = Window {
        start_ms: f64::NEG_INFINITY,
        end_ms: f64::INFINITY,
    };

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_ms && t < self.end_ms
    }

    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeBytes {
    pub sent: u64,
    pub received: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub jobs: usize,
    pub per_node: BTreeMap<String, NodeBytes>,
    /// Every frame counted once.
    pub total_bytes: u64,
}

impl BandwidthReport {
    /// Average throughput over the window; `None` for unbounded windows.
    pub fn bytes_per_second(&self, window: Window) -> Option<f64> {
        let d = window.duration_ms();
        (d.is_finite() && d > 0.0).then(|| self.total_bytes as f64 * 1000.0 / d)
    }
}

/// Byte totals per node for the jobs submitted inside `window`.
pub fn bandwidth(traces: &[JobTrace], window: Window) -> BandwidthReport {
    let mut report = BandwidthReport::default();
    for t in traces.iter().filter(|t| window.contains(t.submitted_at_ms)) {
        report.jobs += 1;
        report.total_bytes += t.bytes_up + t.bytes_down;
        for n in &t.nodes {
            let e = report.per_node.entry(n.node_id.clone()).or_default();
            e.sent += n.bytes_sent;
            e.received += n.bytes_received;
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameKind {
    JobRequest,
    Decision,
    Data,
    CloudForward,
    Fanout,
    EnsembleReply,
    Response,
    Heartbeat,
}

/// One message on the wire, as seen by the transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub at_ms: f64,
    pub from: String,
    pub to: String,
    pub kind: FrameKind,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

/// Append-only record of every frame the transport carried.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frames: Vec<FrameRecord>,
}

impl FrameLog {
    pub fn push(&mut self, frame: FrameRecord) {
        self.frames.push(frame);
    }

    pub fn count(&self, kind: FrameKind, window: Window) -> usize {
        self.frames
            .iter()
            .filter(|f| f.kind == kind && window.contains(f.at_ms))
            .count()
    }

    pub fn bytes_of(&self, kind: FrameKind, window: Window) -> u64 {
        self.frames
            .iter()
            .filter(|f| f.kind == kind && window.contains(f.at_ms))
            .map(|f| f.bytes)
            .sum()
    }

    /// Bytes of all frames that belong to some job.
    pub fn job_bytes(&self) -> u64 {
        self.frames
            .iter()
            .filter(|f| f.job_id.is_some())
            .map(|f| f.bytes)
            .sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.frames.iter().map(|f| f.bytes).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub idle_watts: f64,
    pub busy_watts: f64,
}

/// Two-level linear power model per node class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub gateway: PowerProfile,
    pub worker: PowerProfile,
    pub broker: PowerProfile,
    pub cloud: PowerProfile,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            gateway: PowerProfile {
                idle_watts: 0.0,
                busy_watts: 0.0,
            },
            worker: PowerProfile {
                idle_watts: 2.0,
                busy_watts: 5.0,
            },
            broker: PowerProfile {
                idle_watts: 5.0,
                busy_watts: 25.0,
            },
            cloud: PowerProfile {
                idle_watts: 20.0,
                busy_watts: 150.0,
            },
        }
    }
}

impl EnergyModel {
    pub fn profile(&self, class: NodeClass) -> PowerProfile {
        match class {
            NodeClass::Gateway => self.gateway,
            NodeClass::Worker => self.worker,
            NodeClass::Broker => self.broker,
            NodeClass::Cloud => self.cloud,
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, p) in [
            ("gateway", self.gateway),
            ("worker", self.worker),
            ("broker", self.broker),
            ("cloud", self.cloud),
        ] {
            if !(p.idle_watts >= 0.0 && p.busy_watts >= p.idle_watts) {
                return Err(MetricsError::BadPowerProfile(name));
            }
        }
        Ok(())
    }
}

/// Joules for one node: busy time at busy power, the rest of the horizon at idle power.
pub fn node_energy(busy_ms: f64, horizon_ms: f64, profile: PowerProfile) -> f64 {
    (busy_ms * profile.busy_watts + (horizon_ms - busy_ms) * profile.idle_watts) / 1000.0
}

/// Energy per node over `horizon_ms`. `nodes` lists nodes that should be
/// reported even if no trace mentions them (they are idle for the horizon).
pub fn energy(
    traces: &[JobTrace],
    model: &EnergyModel,
    horizon_ms: f64,
    nodes: &[(String, NodeClass)],
) -> Result<BTreeMap<String, f64>, MetricsError> {
    model.validate()?;
    let mut busy: BTreeMap<String, (NodeClass, f64)> = BTreeMap::new();
    for (id, class) in nodes {
        busy.entry(id.clone()).or_insert((*class, 0.0));
    }
    for t in traces {
        for n in &t.nodes {
            busy.entry(n.node_id.clone()).or_insert((n.class, 0.0)).1 += n.busy_ms;
        }
    }
    let mut out = BTreeMap::new();
    for (id, (class, busy_ms)) in busy {
        if busy_ms > horizon_ms {
            return Err(MetricsError::BusyExceedsHorizon {
                node: id,
                busy_ms,
                horizon_ms,
            });
        }
        out.insert(id, node_energy(busy_ms, horizon_ms, model.profile(class)));
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Aggregates over one group of traces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub jobs: usize,
    pub arbitration_ms: f64,
    pub latency_ms: f64,
    pub comm_ms: f64,
    pub queuing_ms: f64,
    pub execution_ms: f64,
    pub response_ms: f64,
    /// Jitter over responses in submission order; 0 with fewer than 2 jobs.
    pub jitter_ms: f64,
    pub bytes: u64,
}

impl TimingSummary {
    /// Means over complete traces; incomplete traces are skipped.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a JobTrace>) -> Self {
        let mut complete: Vec<&JobTrace> = traces
            .into_iter()
            .filter(|t| t.missing().is_empty())
            .collect();
        complete.sort_by(|a, b| a.submitted_at_ms.total_cmp(&b.submitted_at_ms));
        let responses: Vec<f64> = complete.iter().filter_map(|t| t.response_ms).collect();
        Self {
            jobs: complete.len(),
            arbitration_ms: mean(complete.iter().filter_map(|t| t.arbitration_ms)),
            latency_ms: mean(complete.iter().filter_map(|t| latency(t).ok())),
            comm_ms: mean(complete.iter().filter_map(|t| t.comm_ms)),
            queuing_ms: mean(complete.iter().filter_map(|t| t.queuing_ms)),
            execution_ms: mean(complete.iter().filter_map(|t| t.execution_ms)),
            response_ms: mean(responses.iter().copied()),
            jitter_ms: jitter(&responses).unwrap_or(0.0),
            bytes: complete.iter().map(|t| t.bytes_up + t.bytes_down).sum(),
        }
    }
}

/// Everything `report` prints: overall and per-scenario timings, bandwidth and energy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: TimingSummary,
    pub by_scenario: BTreeMap<String, TimingSummary>,
    pub bandwidth: BandwidthReport,
    pub heartbeat_frames: usize,
    pub heartbeat_bytes: u64,
    pub horizon_ms: f64,
    pub energy_joules: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn build(
        traces: &[JobTrace],
        frames: Option<&FrameLog>,
        energy_model: &EnergyModel,
        horizon_ms: f64,
        nodes: &[(String, NodeClass)],
    ) -> Result<Self, MetricsError> {
        let mut by_scenario = BTreeMap::new();
        for s in Scenario::ALL {
            let group: Vec<&JobTrace> = traces.iter().filter(|t| t.scenario == s).collect();
            if !group.is_empty() {
                by_scenario.insert(String::from(s.as_str()), TimingSummary::from_traces(group));
            }
        }
        let (heartbeat_frames, heartbeat_bytes) = frames.map_or((0, 0), |f| {
            (
                f.count(FrameKind::Heartbeat, Window::ALL),
                f.bytes_of(FrameKind::Heartbeat, Window::ALL),
            )
        });
        Ok(Self {
            overall: TimingSummary::from_traces(traces),
            by_scenario,
            bandwidth: bandwidth(traces, Window::ALL),
            heartbeat_frames,
            heartbeat_bytes,
            horizon_ms,
            energy_joules: energy(traces, energy_model, horizon_ms, nodes)?,
        })
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9} {:>10}",
            "scenario", "jobs", "arb_ms", "latency_ms", "queue_ms", "exec_ms", "resp_ms", "jitter_ms", "bytes"
        );
        let row = |out: &mut String, name: &str, s: &TimingSummary| {
            let _ = writeln!(
                out,
                "{:<11} {:>5} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>9.2} {:>10}",
                name, s.jobs, s.arbitration_ms, s.latency_ms, s.queuing_ms, s.execution_ms, s.response_ms, s.jitter_ms, s.bytes
            );
        };
        for (name, s) in &self.by_scenario {
            row(&mut out, name, s);
        }
        row(&mut out, "all", &self.overall);
        let _ = writeln!(
            out,
            "\nheartbeats: {} frames, {} bytes",
            self.heartbeat_frames, self.heartbeat_bytes
        );
        let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>12}", "node", "sent_B", "recv_B", "energy_J");
        let mut names: Vec<&String> = self.bandwidth.per_node.keys().collect();
        for n in self.energy_joules.keys() {
            if !names.contains(&n) {
                names.push(n);
            }
        }
        names.sort();
        for n in names {
            let b = self.bandwidth.per_node.get(n).copied().unwrap_or_default();
            let e = self.energy_joules.get(n).copied().unwrap_or(0.0);
            let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>12.3}", n, b.sent, b.received, e);
        }
        out
    }
}
