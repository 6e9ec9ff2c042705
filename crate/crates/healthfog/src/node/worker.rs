//! Worker and cloud nodes: `/api/infer`, `/api/ensemble`,
//! `/api/ensemble-reply` and `/api/load`, plus heartbeats to the broker.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::{get, post};
use axum::Router;

use healthfog_core::config::KvConfig;
use healthfog_core::ensemble::DEFAULT_GATE_THRESHOLD;
use healthfog_core::protocol::{
    self, EnsembleFanout, EnsembleReply, JobRequest, Scenario, EP_ENSEMBLE, EP_ENSEMBLE_REPLY, EP_HEARTBEAT,
    EP_INFER, EP_LOAD,
};
use healthfog_core::worker::InferenceEngine;

use super::{bind, decode_body, join_url, parse_peers, serve, ApiError, CoreConfig, Json, Peer, RunningNode, WorkerCore};
use crate::error::{Error, Result};
use crate::io;

pub const WORKER_KEYS: &[&str] = &[
    "node_id",
    "listen",
    "address",
    "broker",
    "peers",
    "model",
    "stats",
    "manifest",
    "member",
    "heartbeat_interval_ms",
    "ensemble_timeout_ms",
    "queue_capacity",
    "extra_exec_ms",
    "load_per_job",
    "gate_threshold",
];

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub node_id: String,
    pub listen: String,
    /// Advertised base URL; defaults to `http://<bound address>`.
    pub address: Option<String>,
    /// Broker base URL. Without one the node sends no heartbeats (cloud role).
    pub broker: Option<String>,
    /// Static ensemble peers; when empty, peers are the broker's live workers.
    pub peers: Vec<Peer>,
    pub heartbeat_interval: Duration,
    pub ensemble_timeout: Duration,
    pub queue_capacity: usize,
    /// Added to every execution, to emulate slower hardware.
    pub extra_exec: Duration,
    pub load_per_job: f64,
    pub gate_threshold: f64,
    pub scenario: Scenario,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            node_id: "worker-1".into(),
            listen: "127.0.0.1:7101".into(),
            address: None,
            broker: None,
            peers: Vec::new(),
            heartbeat_interval: Duration::from_millis(1000),
            ensemble_timeout: Duration::from_millis(2000),
            queue_capacity: 64,
            extra_exec: Duration::ZERO,
            load_per_job: 0.1,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            scenario: Scenario::Worker,
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

/// Model for a node: `model` + `stats`, or `manifest` + `member` (0-based).
pub fn engine_from_kv(kv: &KvConfig, config_path: &Path, node_id: &str) -> Result<InferenceEngine> {
    if let Some(manifest) = kv.get_str("manifest") {
        let member: usize = kv.get("member").map_err(|e| bad("member", e))?.unwrap_or(0);
        let (_, models, stats) = io::load_ensemble(&io::relative_to(config_path, manifest))?;
        let model = models
            .into_iter()
            .nth(member)
            .ok_or_else(|| Error::Invalid(format!("member {member} not in {manifest}")))?;
        return Ok(InferenceEngine::new(node_id, model, stats));
    }
    let model = kv
        .get_str("model")
        .ok_or_else(|| Error::Invalid("config needs `model` and `stats`, or `manifest`".into()))?;
    let stats = kv
        .get_str("stats")
        .ok_or_else(|| Error::Invalid("config needs `stats` next to `model`".into()))?;
    io::load_engine(node_id, &io::relative_to(config_path, model), &io::relative_to(config_path, stats))
}

impl WorkerConfig {
    pub fn from_kv(kv: &KvConfig, scenario: Scenario) -> Result<Self> {
        kv.check_known(WORKER_KEYS).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut c = Self {
            scenario,
            ..Self::default()
        };
        if scenario == Scenario::Cloud {
            c.node_id = "cloud".into();
        }
        kv.read_into("node_id", &mut c.node_id).map_err(|e| bad("node_id", e))?;
        kv.read_into("listen", &mut c.listen).map_err(|e| bad("listen", e))?;
        c.address = kv.get_str("address").map(str::to_string);
        c.broker = kv.get_str("broker").filter(|b| !b.is_empty()).map(str::to_string);
        if let Some(p) = kv.get_str("peers") {
            c.peers = parse_peers(p).map_err(|e| bad("peers", e))?;
        }
        millis(kv, "heartbeat_interval_ms", &mut c.heartbeat_interval)?;
        millis(kv, "ensemble_timeout_ms", &mut c.ensemble_timeout)?;
        millis(kv, "extra_exec_ms", &mut c.extra_exec)?;
        kv.read_into("queue_capacity", &mut c.queue_capacity).map_err(|e| bad("queue_capacity", e))?;
        kv.read_into("load_per_job", &mut c.load_per_job).map_err(|e| bad("load_per_job", e))?;
        kv.read_into("gate_threshold", &mut c.gate_threshold).map_err(|e| bad("gate_threshold", e))?;
        if c.queue_capacity == 0 {
            return Err(bad("queue_capacity", "must be >= 1"));
        }
        if c.heartbeat_interval.is_zero() {
            return Err(bad("heartbeat_interval_ms", "must be > 0"));
        }
        Ok(c)
    }

    fn core_config(&self) -> CoreConfig {
        CoreConfig {
            node_id: self.node_id.clone(),
            scenario: self.scenario,
            queue_capacity: self.queue_capacity,
            extra_exec: self.extra_exec,
            load_per_job: self.load_per_job,
            ensemble_timeout: self.ensemble_timeout,
            gate_threshold: self.gate_threshold,
        }
    }
}

struct WorkerState {
    core: Arc<WorkerCore>,
    peers: Vec<Peer>,
    broker: Option<String>,
}

async fn infer(State(st): State<Arc<WorkerState>>, body: String) -> Result<Json, ApiError> {
    let job: JobRequest = decode_body(&body)?;
    let peers = match (&st.broker, job.ensemble && st.peers.is_empty()) {
        (Some(broker), true) => st.core.peers_from_broker(broker).await,
        _ => st.peers.clone(),
    };
    Ok(Json::of(&st.core.handle_job(&job, &peers).await?))
}

async fn ensemble(State(st): State<Arc<WorkerState>>, body: String) -> Result<axum::http::StatusCode, ApiError> {
    let frame: EnsembleFanout = decode_body(&body)?;
    st.core.accept_fanout(frame);
    Ok(axum::http::StatusCode::ACCEPTED)
}

async fn ensemble_reply(State(st): State<Arc<WorkerState>>, body: String) -> Result<Json, ApiError> {
    let reply: EnsembleReply = decode_body(&body)?;
    let outcome = st.core.accept_reply(reply);
    Ok(Json(format!("{{\"outcome\":\"{outcome:?}\"}}")))
}

async fn load(State(st): State<Arc<WorkerState>>) -> Json {
    Json::of(&st.core.heartbeat(false))
}

/// Routes shared by every node that runs inference.
pub fn inference_routes<S: Clone + Send + Sync + 'static>(core: Arc<WorkerCore>) -> Router<S> {
    let st = Arc::new(WorkerState {
        core,
        peers: Vec::new(),
        broker: None,
    });
    Router::new()
        .route(EP_ENSEMBLE, post(ensemble))
        .route(EP_ENSEMBLE_REPLY, post(ensemble_reply))
        .with_state(st)
}

pub async fn start_worker(cfg: WorkerConfig, engine: InferenceEngine) -> Result<RunningNode> {
    let listener = bind(&cfg.listen).await.map_err(|e| Error::Network(format!("bind {}: {e}", cfg.listen)))?;
    let local = listener.local_addr().map_err(|e| Error::Network(e.to_string()))?;
    let http = reqwest::Client::new();
    let core = WorkerCore::new(cfg.core_config(), engine, http.clone());
    *core.address.lock().expect("address lock") = cfg.address.clone().unwrap_or_else(|| format!("http://{local}"));
    let st = Arc::new(WorkerState {
        core: Arc::clone(&core),
        peers: cfg.peers.clone(),
        broker: cfg.broker.clone(),
    });
    let app = Router::new()
        .route(EP_INFER, post(infer))
        .route(EP_ENSEMBLE, post(ensemble))
        .route(EP_ENSEMBLE_REPLY, post(ensemble_reply))
        .route(EP_LOAD, get(load))
        .with_state(st);
    let (addr, shutdown, handle) = serve(listener, app).await;
    let mut tasks = Vec::new();
    if let Some(broker) = cfg.broker.clone() {
        tasks.push(tokio::spawn(heartbeat_loop(core, http, broker, cfg.heartbeat_interval)));
    }
    Ok(RunningNode::new(addr, shutdown, handle, tasks))
}

async fn heartbeat_loop(core: Arc<WorkerCore>, http: reqwest::Client, broker: String, every: Duration) {
    let url = join_url(&broker, EP_HEARTBEAT);
    let mut tick = tokio::time::interval(every);
    loop {
        tick.tick().await;
        let hb = core.heartbeat(true);
        let sent = http
            .post(&url)
            .header(axum::http::header::CONTENT_TYPE, "application/json")
            .body(protocol::encode(&hb))
            .timeout(every.max(Duration::from_millis(500)))
            .send()
            .await;
        if let Err(e) = sent {
            tracing::debug!(%url, error = %e, "heartbeat not delivered");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys() {
        let kv = KvConfig::parse(
            "node_id = w7\nlisten = 0.0.0.0:9000\npeers = w8=http://h:1, w9=http://h:2\nensemble_timeout_ms = 250\nmodel = m\nstats = s\n",
        )
        .unwrap();
        let c = WorkerConfig::from_kv(&kv, Scenario::Worker).unwrap();
        assert_eq!(c.node_id, "w7");
        assert_eq!(c.peers.len(), 2);
        assert_eq!(c.peers[1].address, "http://h:2");
        assert_eq!(c.ensemble_timeout, Duration::from_millis(250));
        let cloud = WorkerConfig::from_kv(&KvConfig::default(), Scenario::Cloud).unwrap();
        assert_eq!(cloud.node_id, "cloud");
        assert!(WorkerConfig::from_kv(&KvConfig::parse("colour = red").unwrap(), Scenario::Worker).is_err());
        assert!(WorkerConfig::from_kv(&KvConfig::parse("queue_capacity = 0").unwrap(), Scenario::Worker).is_err());
    }
}
