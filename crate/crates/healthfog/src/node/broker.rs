//! Broker node: worker registry, arbitration, cloud forwarding with
//! fallback, and an in-process worker for BrokerOnly jobs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use healthfog_core::broker::{self, ArbitrationContext, BrokerConfig, NodeRegistry};
use healthfog_core::config::{KvConfig, BROKER_KEYS};
use healthfog_core::protocol::{
    self, ArbitrationDecision, Heartbeat, JobAck, JobRequest, JobResponse, QuarantineRequest, Scenario,
    EP_HEARTBEAT, EP_INFER, EP_JOB, EP_LOAD, EP_METRICS, EP_NODES, EP_QUARANTINE,
};
use healthfog_core::worker::InferenceEngine;

use super::worker::inference_routes;
use super::{
    bind, decode_body, get_json, join_url, now_ms, post_json, serve, ApiError, CoreConfig, Json, Peer, RunningNode,
    WorkerCore,
};
use crate::error::{Error, Result};

pub const BROKER_NODE_KEYS: &[&str] = &[
    "listen",
    "model",
    "stats",
    "manifest",
    "member",
    "live_probes",
    "probe_timeout_ms",
    "cloud_timeout_ms",
    "worker_timeout_ms",
    "ensemble_timeout_ms",
    "queue_capacity",
    "extra_exec_ms",
];

#[derive(Debug, Clone)]
pub struct BrokerNodeConfig {
    pub broker: BrokerConfig,
    pub listen: String,
    /// Ask every eligible worker for its load before arbitrating.
    pub live_probes: bool,
    pub probe_timeout: Duration,
    pub cloud_timeout: Duration,
    /// Limit for relayed jobs sent to a worker.
    pub worker_timeout: Duration,
    pub ensemble_timeout: Duration,
    pub queue_capacity: usize,
    pub extra_exec: Duration,
}

impl Default for BrokerNodeConfig {
    fn default() -> Self {
        Self {
            broker: BrokerConfig::default(),
            listen: "127.0.0.1:7100".into(),
            live_probes: true,
            probe_timeout: Duration::from_millis(250),
            cloud_timeout: Duration::from_secs(5),
            worker_timeout: Duration::from_secs(10),
            ensemble_timeout: Duration::from_millis(2000),
            queue_capacity: 64,
            extra_exec: Duration::ZERO,
        }
    }
}

fn bad(key: &str, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{key}: {e}"))
}

fn millis(kv: &KvConfig, key: &str, slot: &mut Duration) -> Result<()> {
    if let Some(v) = kv.get::<f64>(key).map_err(|e| bad(key, e))? {
        if !(v >= 0.0) {
            return Err(bad(key, "must be >= 0"));
        }
        *slot = Duration::from_secs_f64(v / 1000.0);
    }
    Ok(())
}

impl BrokerNodeConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let known: Vec<&str> = BROKER_KEYS.iter().chain(BROKER_NODE_KEYS).copied().collect();
        kv.check_known(&known).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut c = Self::default();
        c.broker.apply_kv(kv).map_err(|e| Error::Invalid(e.to_string()))?;
        kv.read_into("listen", &mut c.listen).map_err(|e| bad("listen", e))?;
        kv.read_into("live_probes", &mut c.live_probes).map_err(|e| bad("live_probes", e))?;
        millis(kv, "probe_timeout_ms", &mut c.probe_timeout)?;
        millis(kv, "cloud_timeout_ms", &mut c.cloud_timeout)?;
        millis(kv, "worker_timeout_ms", &mut c.worker_timeout)?;
        millis(kv, "ensemble_timeout_ms", &mut c.ensemble_timeout)?;
        millis(kv, "extra_exec_ms", &mut c.extra_exec)?;
        kv.read_into("queue_capacity", &mut c.queue_capacity).map_err(|e| bad("queue_capacity", e))?;
        if c.queue_capacity == 0 {
            return Err(bad("queue_capacity", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&c.broker.overload_threshold) {
            return Err(bad("overload_threshold", "must lie in [0, 1]"));
        }
        Ok(c)
    }
}

/// Aggregates served on `/api/metrics`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BrokerMetrics {
    pub jobs: usize,
    pub rejected: usize,
    pub by_scenario: BTreeMap<String, usize>,
    pub fallbacks: usize,
    pub mean_arbitration_ms: f64,
    pub max_arbitration_ms: f64,
    pub load_probes: usize,
    pub heartbeats: usize,
    pub bytes_received: u64,
    pub bytes_sent: u64,
    pub live_workers: usize,
}

struct BrokerState {
    cfg: BrokerNodeConfig,
    registry: RwLock<NodeRegistry>,
    core: Arc<WorkerCore>,
    http: reqwest::Client,
    metrics: Mutex<BrokerMetrics>,
    arbitration_total_ms: Mutex<f64>,
}

impl BrokerState {
    fn count_bytes(&self, received: usize, sent: usize) {
        let mut m = self.metrics.lock().expect("metrics lock");
        m.bytes_received += received as u64;
        m.bytes_sent += sent as u64;
    }

    /// Refreshes the loads of eligible workers; returns the number of probes.
    async fn probe_loads(&self) -> usize {
        let targets: Vec<String> = {
            let reg = self.registry.read().expect("registry lock");
            reg.eligible(now_ms()).map(|e| e.heartbeat.address().to_string()).collect()
        };
        for addr in &targets {
            let url = join_url(addr, EP_LOAD);
            match get_json::<Heartbeat>(&self.http, &url, Some(self.cfg.probe_timeout)).await {
                Ok((hb, len)) => {
                    self.count_bytes(len, 0);
                    let _ = self.registry.write().expect("registry lock").register_heartbeat(hb);
                }
                Err(e) => tracing::debug!(%url, error = %e, "load probe failed"),
            }
        }
        targets.len()
    }

    fn decide(&self, job: &JobRequest, cloud_available: bool) -> ArbitrationDecision {
        let reg = self.registry.read().expect("registry lock");
        let ctx = ArbitrationContext {
            now_ms: now_ms(),
            broker_queue_depth: self.core.executor.depth(),
            cloud_available,
        };
        let mut a = broker::arbitrate(job, &reg, &self.cfg.broker, ctx);
        if matches!(a.decision.scenario, Scenario::BrokerOnly | Scenario::Cloud) {
            a.decision.target = self.core.address();
        }
        a.decision
    }

    fn live_peers(&self) -> Vec<Peer> {
        let reg = self.registry.read().expect("registry lock");
        reg.eligible(now_ms())
            .map(|e| Peer {
                node_id: e.heartbeat.node_id.clone(),
                address: e.heartbeat.address().to_string(),
            })
            .collect()
    }

    /// Runs the job where `decision` says, with the broker relaying.
    async fn execute(&self, job: &JobRequest, decision: &ArbitrationDecision) -> Result<JobResponse, ApiError> {
        let forwarded = JobRequest {
            ensemble: decision.ensemble,
            relay: false,
            ..job.clone()
        };
        match decision.scenario {
            Scenario::BrokerOnly => {
                let peers = if decision.ensemble { self.live_peers() } else { Vec::new() };
                self.core.handle_job(&forwarded, &peers).await
            }
            Scenario::Worker | Scenario::Cloud => {
                let timeout = if decision.scenario == Scenario::Cloud {
                    self.cfg.cloud_timeout
                } else {
                    self.cfg.worker_timeout
                };
                let body = protocol::encode(&forwarded);
                let sent = body.len();
                // A Cloud decision targets the broker itself; the broker forwards.
                let base = match decision.scenario {
                    Scenario::Cloud => self.cfg.broker.cloud_endpoint.as_deref().unwrap_or(&decision.target),
                    _ => &decision.target,
                };
                let url = join_url(base, EP_INFER);
                let (resp, len) = post_json::<JobResponse>(&self.http, &url, body, Some(timeout))
                    .await
                    .map_err(ApiError::bad_gateway)?;
                self.count_bytes(len, sent);
                Ok(resp)
            }
        }
    }

    async fn handle(&self, job: JobRequest) -> Result<JobAck, ApiError> {
        let start = Instant::now();
        let probes = if self.cfg.live_probes { self.probe_loads().await } else { 0 };
        let mut decision = self.decide(&job, true);
        let arbitration_ms = start.elapsed().as_secs_f64() * 1000.0;
        {
            let mut m = self.metrics.lock().expect("metrics lock");
            m.jobs += 1;
            m.load_probes += probes;
            *m.by_scenario.entry(decision.scenario.as_str().to_string()).or_default() += 1;
            m.max_arbitration_ms = m.max_arbitration_ms.max(arbitration_ms);
            let mut total = self.arbitration_total_ms.lock().expect("metrics lock");
            *total += arbitration_ms;
            m.mean_arbitration_ms = *total / m.jobs as f64;
        }
        let direct = decision.scenario == Scenario::Worker && !job.relay;
        if direct {
            return Ok(JobAck {
                job_id: job.job_id,
                decision,
                arbitration_ms,
                response: None,
            });
        }
        let mut fallback = false;
        let mut response = match self.execute(&job, &decision).await {
            Ok(r) => r,
            Err(e) if decision.scenario != Scenario::BrokerOnly => {
                tracing::warn!(target = %decision.target, error = %e.message, "falling back");
                fallback = true;
                self.metrics.lock().expect("metrics lock").fallbacks += 1;
                if decision.scenario == Scenario::Cloud {
                    decision = self.decide(&job, false);
                    match self.execute(&job, &decision).await {
                        Ok(r) => r,
                        Err(_) => self.local_fallback(&job, &mut decision).await?,
                    }
                } else {
                    self.local_fallback(&job, &mut decision).await?
                }
            }
            Err(e) => return Err(e),
        };
        response.fallback |= fallback;
        response.timings.arbitration_ms = arbitration_ms;
        Ok(JobAck {
            job_id: job.job_id,
            decision,
            arbitration_ms,
            response: Some(response),
        })
    }

    async fn local_fallback(&self, job: &JobRequest, decision: &mut ArbitrationDecision) -> Result<JobResponse, ApiError> {
        *decision = ArbitrationDecision {
            scenario: Scenario::BrokerOnly,
            node_id: self.cfg.broker.node_id.clone(),
            target: self.core.address(),
            ensemble: false,
            decided_at: now_ms(),
        };
        self.execute(job, decision).await
    }
}

async fn job(State(st): State<Arc<BrokerState>>, body: String) -> Result<Json, ApiError> {
    let request: JobRequest = match decode_body(&body) {
        Ok(r) => r,
        Err(e) => {
            st.metrics.lock().expect("metrics lock").rejected += 1;
            return Err(e);
        }
    };
    let ack = st.handle(request).await?;
    let out = Json::of(&ack);
    st.count_bytes(body.len(), out.0.len());
    Ok(out)
}

async fn heartbeat(State(st): State<Arc<BrokerState>>, body: String) -> Result<Json, ApiError> {
    let hb: Heartbeat = decode_body(&body)?;
    st.registry.write().expect("registry lock").register_heartbeat(hb)?;
    let mut m = st.metrics.lock().expect("metrics lock");
    m.heartbeats += 1;
    m.bytes_received += body.len() as u64;
    Ok(Json("{}".into()))
}

async fn nodes(State(st): State<Arc<BrokerState>>) -> Json {
    Json::of(&st.registry.read().expect("registry lock").node_infos(now_ms()))
}

async fn metrics(State(st): State<Arc<BrokerState>>) -> Json {
    let live = st.registry.read().expect("registry lock").eligible(now_ms()).count();
    let mut m = st.metrics.lock().expect("metrics lock").clone();
    m.live_workers = live;
    Json(serde_json::to_string(&m).expect("metrics serialize"))
}

async fn quarantine(State(st): State<Arc<BrokerState>>, body: String) -> Result<Json, ApiError> {
    let req: QuarantineRequest = decode_body(&body)?;
    if !st.registry.write().expect("registry lock").set_quarantined(&req.node_id, req.quarantined) {
        return Err(ApiError {
            status: axum::http::StatusCode::NOT_FOUND,
            message: format!("unknown node {}", req.node_id),
        });
    }
    Ok(Json::of(&req))
}

pub async fn start_broker(cfg: BrokerNodeConfig, engine: InferenceEngine) -> Result<RunningNode> {
    let listener = bind(&cfg.listen).await.map_err(|e| Error::Network(format!("bind {}: {e}", cfg.listen)))?;
    let local = listener.local_addr().map_err(|e| Error::Network(e.to_string()))?;
    let http = reqwest::Client::new();
    let core = WorkerCore::new(
        CoreConfig {
            node_id: cfg.broker.node_id.clone(),
            scenario: Scenario::BrokerOnly,
            queue_capacity: cfg.queue_capacity,
            extra_exec: cfg.extra_exec,
            load_per_job: 0.1,
            ensemble_timeout: cfg.ensemble_timeout,
            gate_threshold: cfg.broker.gate_threshold,
        },
        engine,
        http.clone(),
    );
    let advertised = if cfg.broker.address == BrokerConfig::default().address {
        format!("http://{local}")
    } else {
        cfg.broker.address.clone()
    };
    *core.address.lock().expect("address lock") = advertised;
    let st = Arc::new(BrokerState {
        registry: RwLock::new(NodeRegistry::new(cfg.broker.stale_timeout_ms)),
        core: Arc::clone(&core),
        http,
        metrics: Mutex::new(BrokerMetrics::default()),
        arbitration_total_ms: Mutex::new(0.0),
        cfg,
    });
    let app = Router::new()
        .route(EP_JOB, post(job))
        .route(EP_HEARTBEAT, post(heartbeat))
        .route(EP_NODES, get(nodes))
        .route(EP_METRICS, get(metrics))
        .route(EP_QUARANTINE, post(quarantine))
        .with_state(st)
        .merge(inference_routes(core));
    let (addr, shutdown, handle) = serve(listener, app).await;
    Ok(RunningNode::new(addr, shutdown, handle, Vec::new()))
}

pub fn broker_from_file(path: &Path) -> Result<(BrokerNodeConfig, KvConfig)> {
    let kv = crate::io::load_kv(path)?;
    Ok((BrokerNodeConfig::from_kv(&kv)?, kv))
}
