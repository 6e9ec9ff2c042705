//! Worker registry and the arbitration policy deciding where a job runs.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::protocol::{ArbitrationDecision, Heartbeat, JobRequest, NodeInfo, ProtocolError, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub node_id: String,
    /// Address gateways use to reach the broker.
    pub address: String,
    /// A worker at or above this CPU load is not eligible.
    pub overload_threshold: f64,
    pub heartbeat_interval_ms: u64,
    pub stale_timeout_ms: u64,
    /// Payloads larger than this go to the cloud when one is configured.
    pub big_job_bytes: usize,
    pub cloud_endpoint: Option<String>,
    /// Fixed cost of one arbitration, used when time is simulated.
    pub arbitration_base_ms: f64,
    /// Cost of checking one worker's load, used when time is simulated.
    pub load_check_ms: f64,
    /// Jobs the broker accepts in its own queue before it counts as full.
    pub broker_capacity: usize,
    pub gate_threshold: f64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            node_id: "broker".into(),
            address: "broker".into(),
            overload_threshold: 0.9,
            heartbeat_interval_ms: 1000,
            stale_timeout_ms: 3000,
            big_job_bytes: 1 << 20,
            cloud_endpoint: None,
            arbitration_base_ms: 5.0,
            load_check_ms: 0.0,
            broker_capacity: 8,
            gate_threshold: crate::ensemble::DEFAULT_GATE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub heartbeat: Heartbeat,
    /// `heartbeat.sent_at + stale_timeout_ms`.
    pub deadline: u64,
    pub quarantined: bool,
}

impl NodeEntry {
    pub fn is_live(&self, now_ms: u64) -> bool {
        now_ms < self.deadline
    }
}

/// Latest heartbeat per worker, keyed by node id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistry {
    nodes: BTreeMap<String, NodeEntry>,
    stale_timeout_ms: u64,
}

impl NodeRegistry {
    pub fn new(stale_timeout_ms: u64) -> Self {
        Self {
            nodes: BTreeMap::new(),
            stale_timeout_ms,
        }
    }

    /// Keeps the heartbeat with the latest `sent_at` per node (ties: the newest arrival).
    pub fn register_heartbeat(&mut self, hb: Heartbeat) -> Result<(), ProtocolError> {
        hb.validate()?;
        let deadline = hb.sent_at.saturating_add(self.stale_timeout_ms);
        match self.nodes.get_mut(&hb.node_id) {
            Some(entry) if entry.heartbeat.sent_at > hb.sent_at => {}
            Some(entry) => {
                entry.heartbeat = hb;
                entry.deadline = deadline;
            }
            None => {
                self.nodes.insert(
                    hb.node_id.clone(),
                    NodeEntry {
                        heartbeat: hb,
                        deadline,
                        quarantined: false,
                    },
                );
            }
        }
        Ok(())
    }

    /// Returns false when the node is unknown.
    pub fn set_quarantined(&mut self, node_id: &str, quarantined: bool) -> bool {
        match self.nodes.get_mut(node_id) {
            Some(e) => {
                e.quarantined = quarantined;
                true
            }
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, node_id: &str) -> Option<&NodeEntry> {
        self.nodes.get(node_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &NodeEntry> {
        self.nodes.values()
    }

    pub fn is_live(&self, node_id: &str, now_ms: u64) -> bool {
        self.nodes.get(node_id).is_some_and(|e| e.is_live(now_ms))
    }

    /// Live, non-quarantined workers in node-id order.
    pub fn eligible(&self, now_ms: u64) -> impl Iterator<Item = &NodeEntry> {
        self.nodes
            .values()
            .filter(move |e| e.is_live(now_ms) && !e.quarantined)
    }

    pub fn node_infos(&self, now_ms: u64) -> Vec<NodeInfo> {
        self.nodes
            .values()
            .map(|e| NodeInfo {
                node_id: e.heartbeat.node_id.clone(),
                address: e.heartbeat.address().to_string(),
                cpu_load: e.heartbeat.cpu_load,
                queue_depth: e.heartbeat.queue_depth,
                last_seen: e.heartbeat.sent_at,
                live: e.is_live(now_ms),
                quarantined: e.quarantined,
            })
            .collect()
    }
}

/// Broker-side state that the registry does not carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArbitrationContext {
    pub now_ms: u64,
    /// Jobs currently queued or running on the broker itself.
    pub broker_queue_depth: usize,
    /// False once the cloud failed for this job, forcing an edge placement.
    pub cloud_available: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arbitration {
    pub decision: ArbitrationDecision,
    /// Workers whose load was examined.
    pub load_checks: usize,
}

/// Placement policy, first match wins:
///
/// 1. latency-tolerant or oversized job, cloud configured: Cloud
/// 2. some eligible worker below the overload threshold: the least-loaded
///    one (ties by smallest node id)
/// 3. broker has queue capacity: BrokerOnly
/// 4. cloud configured: Cloud
/// 5. otherwise BrokerOnly
pub fn arbitrate(
    request: &JobRequest,
    registry: &NodeRegistry,
    config: &BrokerConfig,
    ctx: ArbitrationContext,
) -> Arbitration {
    let cloud = ctx.cloud_available && config.cloud_endpoint.is_some();
    let big = request.payload.len() > config.big_job_bytes;
    let decide = |scenario: Scenario, node_id: &str, target: &str| ArbitrationDecision {
        scenario,
        node_id: node_id.to_string(),
        target: target.to_string(),
        ensemble: request.ensemble && scenario != Scenario::Cloud,
        decided_at: ctx.now_ms,
    };
    let cloud_decision = || {
        let id = config.cloud_endpoint.as_deref().unwrap_or_default();
        decide(Scenario::Cloud, id, &config.address)
    };

    if cloud && (request.latency_tolerant || big) {
        return Arbitration {
            decision: cloud_decision(),
            load_checks: 0,
        };
    }

    let mut load_checks = 0;
    let mut best: Option<&NodeEntry> = None;
    for entry in registry.eligible(ctx.now_ms) {
        load_checks += 1;
        let load = entry.heartbeat.cpu_load;
        if load >= config.overload_threshold {
            continue;
        }
        // BTreeMap iteration is in node-id order, so strict < keeps the smallest id on ties
        if best.is_none_or(|b| load < b.heartbeat.cpu_load) {
            best = Some(entry);
        }
    }
    let decision = if let Some(w) = best {
        decide(Scenario::Worker, &w.heartbeat.node_id, w.heartbeat.address())
    } else if ctx.broker_queue_depth < config.broker_capacity {
        decide(Scenario::BrokerOnly, &config.node_id, &config.address)
    } else if cloud {
        cloud_decision()
    } else {
        decide(Scenario::BrokerOnly, &config.node_id, &config.address)
    };
    Arbitration {
        decision,
        load_checks,
    }
}

/// Modeled arbitration time: a fixed overhead plus one load check per examined worker.
pub fn arbitration_cost_ms(load_checks: usize, config: &BrokerConfig) -> f64 {
    config.arbitration_base_ms + load_checks as f64 * config.load_check_ms
}
