//! Deterministic discrete-event simulation of a gateway, a broker, worker
//! nodes and a cloud node exchanging the real protocol messages.
//!
//! Time is virtual and every duration is quantized to 1/1024 ms, so sums of
//! spans are exact in `f64` and traces satisfy
//! `response = arbitration + comm + queuing + execution` with no rounding slack.
//! The broker registry, arbitration policy, worker queue, inference engine and
//! ensemble collector are the same types the network servers use.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::{self, ArbitrationContext, BrokerConfig, NodeRegistry};
use crate::config::{ConfigError, KvConfig, BROKER_KEYS};
use crate::ensemble::PredictionResult;
use crate::heartdata::{fit_norm, parse_csv, NormStats, CLEVELAND_CSV};
use crate::metrics::{EnergyModel, FrameKind, FrameLog, FrameRecord, JobTrace, MetricsError, MetricsReport, NodeClass};
use crate::neuralnet::init_model;
use crate::protocol::{
    self, ArbitrationDecision, EnsembleReply, Heartbeat, JobAck, JobRequest, JobResponse, Scenario,
};
use crate::worker::{EnsembleCollector, InferenceEngine, JobQueue, ReplyOutcome, WorkerError};

pub const GATEWAY_ID: &str = "gateway";
pub const BROKER_ID: &str = "broker";
pub const CLOUD_ID: &str = "cloud";

/// First record of the bundled dataset, used as the default job payload.
pub const DEFAULT_PAYLOAD: &str = "63,1,3,145,233,1,0,150,0,2.3,0,0,1";

pub fn worker_id(index: usize) -> String {
    format!("worker-{}", index + 1)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error("node {node}: {source}")]
    Node { node: String, source: WorkerError },
    #[error("need {needed} worker models, got {got}")]
    Models { needed: usize, got: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Service-time abstraction of a deployment plus the workload to drive it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub lan_delay_ms: f64,
    /// Half-width of the uniform jitter on LAN delays.
    pub lan_jitter_ms: f64,
    pub cloud_delay_ms: f64,
    pub cloud_jitter_ms: f64,
    pub worker_exec_ms: f64,
    pub broker_exec_ms: f64,
    pub cloud_exec_ms: f64,
    pub load_check_ms: f64,
    pub arbitration_base_ms: f64,
    pub n_workers: usize,
    pub ensemble: bool,
    pub n_jobs: usize,
    pub inter_arrival_ms: f64,
    /// Time before the first job, letting the first heartbeats arrive.
    pub warmup_ms: f64,
    pub latency_tolerant: bool,
    pub cloud_enabled: bool,
    /// The cloud never answers; the broker falls back after `cloud_timeout_ms`.
    pub cloud_down: bool,
    pub cloud_timeout_ms: f64,
    pub heartbeat_interval_ms: f64,
    pub stale_timeout_ms: f64,
    pub overload_threshold: f64,
    pub broker_capacity: usize,
    pub queue_capacity: usize,
    /// Reported CPU load of an idle worker.
    pub worker_base_load: f64,
    /// Reported load added per queued or running job.
    pub load_per_job: f64,
    pub ensemble_timeout_ms: f64,
    pub gate_threshold: f64,
    pub payload: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            lan_delay_ms: 2.0,
            lan_jitter_ms: 1.0,
            cloud_delay_ms: 100.0,
            cloud_jitter_ms: 10.0,
            worker_exec_ms: 50.0,
            broker_exec_ms: 30.0,
            cloud_exec_ms: 10.0,
            load_check_ms: 0.0,
            arbitration_base_ms: 5.0,
            n_workers: 2,
            ensemble: false,
            n_jobs: 100,
            inter_arrival_ms: 200.0,
            warmup_ms: 100.0,
            latency_tolerant: false,
            cloud_enabled: true,
            cloud_down: false,
            cloud_timeout_ms: 1000.0,
            heartbeat_interval_ms: 1000.0,
            stale_timeout_ms: 3000.0,
            overload_threshold: 0.9,
            broker_capacity: 8,
            queue_capacity: 4096,
            worker_base_load: 0.1,
            load_per_job: 0.2,
            ensemble_timeout_ms: 2000.0,
            gate_threshold: crate::ensemble::DEFAULT_GATE_THRESHOLD,
            payload: DEFAULT_PAYLOAD.into(),
        }
    }
}

pub const SIM_KEYS: &[&str] = &[
    "seed",
    "lan_delay_ms",
    "lan_jitter_ms",
    "cloud_delay_ms",
    "cloud_jitter_ms",
    "worker_exec_ms",
    "broker_exec_ms",
    "cloud_exec_ms",
    "n_workers",
    "ensemble",
    "n_jobs",
    "inter_arrival_ms",
    "warmup_ms",
    "latency_tolerant",
    "cloud_enabled",
    "cloud_down",
    "cloud_timeout_ms",
    "queue_capacity",
    "worker_base_load",
    "load_per_job",
    "ensemble_timeout_ms",
    "payload",
];

impl SimConfig {
    /// Reads a scenario file: the broker keys plus the simulation keys.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, SimError> {
        let known: Vec<&str> = BROKER_KEYS.iter().chain(SIM_KEYS).copied().collect();
        kv.check_known(&known)?;
        let mut c = Self::default();
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("lan_delay_ms", &mut c.lan_delay_ms)?;
        kv.read_into("lan_jitter_ms", &mut c.lan_jitter_ms)?;
        kv.read_into("cloud_delay_ms", &mut c.cloud_delay_ms)?;
        kv.read_into("cloud_jitter_ms", &mut c.cloud_jitter_ms)?;
        kv.read_into("worker_exec_ms", &mut c.worker_exec_ms)?;
        kv.read_into("broker_exec_ms", &mut c.broker_exec_ms)?;
        kv.read_into("cloud_exec_ms", &mut c.cloud_exec_ms)?;
        kv.read_into("load_check_ms", &mut c.load_check_ms)?;
        kv.read_into("arbitration_base_ms", &mut c.arbitration_base_ms)?;
        kv.read_into("n_workers", &mut c.n_workers)?;
        kv.read_into("ensemble", &mut c.ensemble)?;
        kv.read_into("n_jobs", &mut c.n_jobs)?;
        kv.read_into("inter_arrival_ms", &mut c.inter_arrival_ms)?;
        kv.read_into("warmup_ms", &mut c.warmup_ms)?;
        kv.read_into("latency_tolerant", &mut c.latency_tolerant)?;
        kv.read_into("cloud_enabled", &mut c.cloud_enabled)?;
        kv.read_into("cloud_down", &mut c.cloud_down)?;
        kv.read_into("cloud_timeout_ms", &mut c.cloud_timeout_ms)?;
        kv.read_into("heartbeat_interval_ms", &mut c.heartbeat_interval_ms)?;
        if kv.get_str("stale_timeout_ms").is_none() && kv.get_str("heartbeat_interval_ms").is_some() {
            c.stale_timeout_ms = 3.0 * c.heartbeat_interval_ms;
        }
        kv.read_into("stale_timeout_ms", &mut c.stale_timeout_ms)?;
        kv.read_into("overload_threshold", &mut c.overload_threshold)?;
        kv.read_into("broker_capacity", &mut c.broker_capacity)?;
        kv.read_into("queue_capacity", &mut c.queue_capacity)?;
        kv.read_into("worker_base_load", &mut c.worker_base_load)?;
        kv.read_into("load_per_job", &mut c.load_per_job)?;
        kv.read_into("ensemble_timeout_ms", &mut c.ensemble_timeout_ms)?;
        kv.read_into("gate_threshold", &mut c.gate_threshold)?;
        if let Some(p) = kv.get_str("payload") {
            c.payload = p.to_string();
        }
        if let Some(v) = kv.get_str("cloud_endpoint") {
            c.cloud_enabled = !v.is_empty() && v != "none";
        }
        Ok(c)
    }

    /// Hard errors for impossible settings; returns warnings for settings
    /// that are legal but unlike a fog deployment.
    pub fn validate(&self) -> Result<Vec<String>, SimError> {
        let durations = [
            ("lan_delay_ms", self.lan_delay_ms),
            ("lan_jitter_ms", self.lan_jitter_ms),
            ("cloud_delay_ms", self.cloud_delay_ms),
            ("cloud_jitter_ms", self.cloud_jitter_ms),
            ("worker_exec_ms", self.worker_exec_ms),
            ("broker_exec_ms", self.broker_exec_ms),
            ("cloud_exec_ms", self.cloud_exec_ms),
            ("load_check_ms", self.load_check_ms),
            ("arbitration_base_ms", self.arbitration_base_ms),
            ("inter_arrival_ms", self.inter_arrival_ms),
            ("warmup_ms", self.warmup_ms),
            ("cloud_timeout_ms", self.cloud_timeout_ms),
            ("ensemble_timeout_ms", self.ensemble_timeout_ms),
            ("worker_base_load", self.worker_base_load),
            ("load_per_job", self.load_per_job),
        ];
        for (name, v) in durations {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SimError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.heartbeat_interval_ms > 0.0) {
            return Err(SimError::Config("heartbeat_interval_ms must be > 0".into()));
        }
        if self.queue_capacity == 0 {
            return Err(SimError::Config("queue_capacity must be >= 1".into()));
        }
        protocol::parse_payload(&self.payload)
            .map_err(|e| SimError::Config(format!("payload: {e}")))?;
        let mut warnings = Vec::new();
        if self.cloud_delay_ms < self.lan_delay_ms {
            warnings.push("cloud_delay_ms < lan_delay_ms: cloud is closer than the LAN".into());
        }
        if self.lan_jitter_ms > self.lan_delay_ms || self.cloud_jitter_ms > self.cloud_delay_ms {
            warnings.push("jitter half-width exceeds the mean delay; draws are clamped at 0".into());
        }
        Ok(warnings)
    }

    fn broker_config(&self) -> BrokerConfig {
        BrokerConfig {
            node_id: BROKER_ID.into(),
            address: BROKER_ID.into(),
            overload_threshold: self.overload_threshold,
            heartbeat_interval_ms: self.heartbeat_interval_ms as u64,
            stale_timeout_ms: self.stale_timeout_ms as u64,
            big_job_bytes: 1 << 20,
            cloud_endpoint: self.cloud_enabled.then(|| CLOUD_ID.to_string()),
            arbitration_base_ms: q(self.arbitration_base_ms),
            load_check_ms: q(self.load_check_ms),
            broker_capacity: self.broker_capacity,
            gate_threshold: self.gate_threshold,
        }
    }
}

/// Rounds to the simulation's time quantum of 1/1024 ms.
fn q(ms: f64) -> f64 {
    libm::round(ms * 1024.0) / 1024.0
}

/// Inference engines for every compute node in the simulated deployment.
#[derive(Debug, Clone)]
pub struct NodeModels {
    pub broker: InferenceEngine,
    pub cloud: InferenceEngine,
    pub workers: Vec<InferenceEngine>,
}

impl NodeModels {
    /// Freshly initialized (untrained) models with statistics from the bundled
    /// dataset. Enough for timing studies, where predictions do not matter.
    pub fn untrained(n_workers: usize, seed: u64) -> Self {
        let stats = bundled_stats();
        let engine = |id: String, s: u64| InferenceEngine::new(id, init_model(s), stats.clone());
        Self {
            broker: engine(BROKER_ID.into(), seed),
            cloud: engine(CLOUD_ID.into(), seed.wrapping_add(1)),
            workers: (0..n_workers)
                .map(|i| engine(worker_id(i), seed.wrapping_add(2 + i as u64)))
                .collect(),
        }
    }
}

fn bundled_stats() -> NormStats {
    let records = parse_csv(CLEVELAND_CSV).expect("bundled dataset parses");
    fit_norm(&records).expect("bundled dataset is non-empty")
}

/// Everything one simulated run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    /// One trace per submitted job, in submission order.
    pub traces: Vec<JobTrace>,
    /// The response the gateway received for each job, in submission order.
    pub responses: Vec<JobResponse>,
    pub frames: FrameLog,
    pub report: MetricsReport,
    pub end_ms: f64,
    pub warnings: Vec<String>,
}

/// Runs a scenario with untrained models.
pub fn run_scenario(cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    run_scenario_with(cfg, &NodeModels::untrained(cfg.n_workers, cfg.seed), &EnergyModel::default())
}

pub fn run_scenario_with(
    cfg: &SimConfig,
    models: &NodeModels,
    energy: &EnergyModel,
) -> Result<SimOutcome, SimError> {
    let warnings = cfg.validate()?;
    if models.workers.len() < cfg.n_workers {
        return Err(SimError::Models {
            needed: cfg.n_workers,
            got: models.workers.len(),
        });
    }
    let mut sim = Sim::new(cfg, models);
    sim.run()?;
    let traces: Vec<JobTrace> = sim.jobs.iter().map(|j| j.trace.clone()).collect();
    let responses: Vec<JobResponse> = sim
        .jobs
        .iter()
        .map(|j| j.response.clone().expect("every job completes"))
        .collect();
    let nodes: Vec<(String, NodeClass)> = sim
        .nodes
        .iter()
        .filter(|n| n.class != NodeClass::Gateway)
        .map(|n| (n.id.clone(), n.class))
        .collect();
    let report = MetricsReport::build(&traces, Some(&sim.frames), energy, sim.now, &nodes)?;
    Ok(SimOutcome {
        traces,
        responses,
        frames: sim.frames,
        report,
        end_ms: sim.now,
        warnings,
    })
}

type NodeIdx = usize;
const GATEWAY: NodeIdx = 0;
const BROKER: NodeIdx = 1;
const CLOUD: NodeIdx = 2;
const FIRST_WORKER: NodeIdx = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Task {
    Primary { job: usize },
    Peer { job: usize, origin: NodeIdx, out_ms: f64 },
}

#[derive(Debug, Clone)]
struct Running {
    task: Task,
    queued_ms: f64,
    exec_ms: f64,
    probs: (f64, f64),
}

struct SimNode<'m> {
    id: String,
    class: NodeClass,
    exec_ms: f64,
    engine: Option<&'m InferenceEngine>,
    queue: JobQueue<Task>,
    running: Option<Running>,
    collector: EnsembleCollector,
}

#[derive(Debug, Clone)]
enum Event {
    Heartbeat { worker: NodeIdx },
    HeartbeatArrive { hb: Heartbeat },
    Submit { job: usize },
    BrokerReceive { job: usize },
    DecisionReady { job: usize },
    GatewayAck { job: usize },
    DataArrive { node: NodeIdx, job: usize },
    ExecDone { node: NodeIdx },
    FanoutArrive { peer: NodeIdx, job: usize, origin: NodeIdx, out_ms: f64 },
    ReplyArrive { origin: NodeIdx, reply: EnsembleReply, path_ms: f64 },
    EnsembleTimeout { node: NodeIdx, job: usize },
    CloudFail { job: usize },
    ResultArrive { to: NodeIdx, job: usize },
}

struct Scheduled {
    at: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap and the earliest event must pop first
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Critical-path bookkeeping of an ensemble vote at its origin.
#[derive(Debug, Clone, Default)]
struct VoteParts {
    receipt: f64,
    local: Option<(f64, f64)>,
    /// Per accepted reply: (network ms out + back, queuing ms, execution ms, arrival time).
    replies: Vec<(f64, f64, f64, f64)>,
    deadline_passed: bool,
}

struct JobState {
    request: JobRequest,
    trace: JobTrace,
    decision: Option<ArbitrationDecision>,
    /// The broker relays data and results for this job.
    via_broker: bool,
    cloud_failed: bool,
    fallback: bool,
    comm: f64,
    queuing: f64,
    execution: f64,
    arbitration: f64,
    vote: VoteParts,
    result: Option<(PredictionResult, bool, String)>,
    response: Option<JobResponse>,
    done: bool,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    broker_cfg: BrokerConfig,
    rng: ChaCha8Rng,
    now: f64,
    seq: u64,
    events: BinaryHeap<Scheduled>,
    nodes: Vec<SimNode<'a>>,
    registry: NodeRegistry,
    jobs: Vec<JobState>,
    frames: FrameLog,
    remaining: usize,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, models: &'a NodeModels) -> Self {
        let node = |id: String, class, exec_ms: f64, engine| SimNode {
            id,
            class,
            exec_ms: q(exec_ms),
            engine,
            queue: JobQueue::new(cfg.queue_capacity),
            running: None,
            collector: EnsembleCollector::new(),
        };
        let mut nodes = alloc::vec![
            node(GATEWAY_ID.into(), NodeClass::Gateway, 0.0, None),
            node(BROKER_ID.into(), NodeClass::Broker, cfg.broker_exec_ms, Some(&models.broker)),
            node(CLOUD_ID.into(), NodeClass::Cloud, cfg.cloud_exec_ms, Some(&models.cloud)),
        ];
        for i in 0..cfg.n_workers {
            nodes.push(node(worker_id(i), NodeClass::Worker, cfg.worker_exec_ms, Some(&models.workers[i])));
        }
        let broker_cfg = cfg.broker_config();
        Self {
            cfg,
            registry: NodeRegistry::new(broker_cfg.stale_timeout_ms),
            broker_cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
            nodes,
            jobs: Vec::new(),
            frames: FrameLog::default(),
            remaining: cfg.n_jobs,
        }
    }

    fn schedule(&mut self, at: f64, event: Event) {
        self.seq += 1;
        self.events.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    fn link_delay(&mut self, from: NodeIdx, to: NodeIdx) -> f64 {
        let (d, h) = if from == CLOUD || to == CLOUD {
            (self.cfg.cloud_delay_ms, self.cfg.cloud_jitter_ms)
        } else {
            (self.cfg.lan_delay_ms, self.cfg.lan_jitter_ms)
        };
        let draw = if h > 0.0 { self.rng.gen_range(d - h..=d + h) } else { d };
        q(draw.max(0.0))
    }

    /// Logs a frame, charges its bytes to the job's trace and returns the link delay.
    fn send(&mut self, from: NodeIdx, to: NodeIdx, kind: FrameKind, body: String, job: Option<usize>) -> f64 {
        let bytes = body.len() as u64;
        self.frames.push(FrameRecord {
            at_ms: self.now,
            from: self.nodes[from].id.clone(),
            to: self.nodes[to].id.clone(),
            kind,
            bytes,
            job_id: job.map(|j| self.jobs[j].request.job_id.clone()),
        });
        if let Some(j) = job {
            let (from_id, from_class) = (self.nodes[from].id.clone(), self.nodes[from].class);
            let (to_id, to_class) = (self.nodes[to].id.clone(), self.nodes[to].class);
            let trace = &mut self.jobs[j].trace;
            match kind {
                FrameKind::JobRequest | FrameKind::Data | FrameKind::CloudForward | FrameKind::Fanout => {
                    trace.bytes_up += bytes
                }
                _ => trace.bytes_down += bytes,
            }
            trace.usage_mut(&from_id, from_class).bytes_sent += bytes;
            trace.usage_mut(&to_id, to_class).bytes_received += bytes;
        }
        self.link_delay(from, to)
    }

    fn run(&mut self) -> Result<(), SimError> {
        for w in 0..self.cfg.n_workers {
            self.schedule(0.0, Event::Heartbeat { worker: FIRST_WORKER + w });
        }
        let warmup = q(self.cfg.warmup_ms);
        let gap = q(self.cfg.inter_arrival_ms);
        for k in 0..self.cfg.n_jobs {
            let at = warmup + gap * k as f64;
            let request = JobRequest {
                job_id: format!("job-{:06}", k + 1),
                payload: self.cfg.payload.clone(),
                ensemble: self.cfg.ensemble,
                latency_tolerant: self.cfg.latency_tolerant,
                submitted_at: at as u64,
                relay: false,
            };
            let mut trace = JobTrace::new(request.job_id.clone(), Scenario::Worker, at);
            trace.ensemble = request.ensemble;
            self.jobs.push(JobState {
                request,
                trace,
                decision: None,
                via_broker: false,
                cloud_failed: false,
                fallback: false,
                comm: 0.0,
                queuing: 0.0,
                execution: 0.0,
                arbitration: 0.0,
                vote: VoteParts::default(),
                result: None,
                response: None,
                done: false,
            });
            self.schedule(at, Event::Submit { job: k });
        }
        while self.remaining > 0 {
            let Some(next) = self.events.pop() else {
                break;
            };
            self.now = next.at;
            self.handle(next.event)?;
        }
        Ok(())
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Heartbeat { worker } => {
                let n = &self.nodes[worker];
                let depth = n.queue.len() + usize::from(n.running.is_some());
                let load = (self.cfg.worker_base_load + self.cfg.load_per_job * depth as f64).min(1.0);
                let hb = Heartbeat {
                    node_id: n.id.clone(),
                    cpu_load: load,
                    queue_depth: depth as u32,
                    sent_at: self.now as u64,
                    address: None,
                };
                let d = self.send(worker, BROKER, FrameKind::Heartbeat, protocol::encode(&hb), None);
                self.schedule(self.now + d, Event::HeartbeatArrive { hb });
                let next = self.now + q(self.cfg.heartbeat_interval_ms);
                self.schedule(next, Event::Heartbeat { worker });
            }
            Event::HeartbeatArrive { hb } => {
                // loads are clamped to [0, 1] above, so this cannot be rejected
                let _ = self.registry.register_heartbeat(hb);
            }
            Event::Submit { job } => {
                let body = protocol::encode(&self.jobs[job].request);
                let d = self.send(GATEWAY, BROKER, FrameKind::JobRequest, body, Some(job));
                self.jobs[job].comm += d;
                self.schedule(self.now + d, Event::BrokerReceive { job });
            }
            Event::BrokerReceive { job } => self.arbitrate(job),
            Event::DecisionReady { job } => self.dispatch(job)?,
            Event::GatewayAck { job } => {
                let target = self.decision_node(job);
                let body = protocol::encode(&self.jobs[job].request);
                let d = self.send(GATEWAY, target, FrameKind::Data, body, Some(job));
                self.jobs[job].comm += d;
                self.schedule(self.now + d, Event::DataArrive { node: target, job });
            }
            Event::DataArrive { node, job } => self.accept_job(node, job)?,
            Event::ExecDone { node } => self.exec_done(node)?,
            Event::FanoutArrive {
                peer,
                job,
                origin,
                out_ms,
            } => {
                self.nodes[peer]
                    .queue
                    .enqueue(Task::Peer { job, origin, out_ms }, self.now)
                    .map_err(|e| self.node_err(peer, e))?;
                self.try_start(peer)?;
            }
            Event::ReplyArrive { origin, reply, path_ms } => {
                let job = self.job_index(&reply.job_id);
                let (q_ms, e_ms) = (reply.queuing_ms, reply.execution_ms);
                let outcome = self.nodes[origin].collector.add_reply(reply, self.now);
                if outcome == ReplyOutcome::Accepted {
                    self.jobs[job].vote.replies.push((path_ms, q_ms, e_ms, self.now));
                    if self.nodes[origin].collector.is_complete(&self.jobs[job].request.job_id) {
                        self.finish_vote(origin, job)?;
                    }
                }
            }
            Event::EnsembleTimeout { node, job } => {
                let id = self.jobs[job].request.job_id.clone();
                if self.nodes[node].collector.is_pending(&id) {
                    self.jobs[job].vote.deadline_passed = true;
                    if self.jobs[job].vote.local.is_some() {
                        self.finish_vote(node, job)?;
                    }
                }
            }
            Event::CloudFail { job } => {
                let j = &mut self.jobs[job];
                j.cloud_failed = true;
                j.fallback = true;
                self.arbitrate(job);
            }
            Event::ResultArrive { to, job } => {
                if to == GATEWAY {
                    self.complete(job);
                } else {
                    // broker relays the result to the gateway inside the job ack
                    let body = protocol::encode(&self.ack(job, true));
                    let d = self.send(BROKER, GATEWAY, FrameKind::Response, body, Some(job));
                    self.jobs[job].comm += d;
                    self.schedule(self.now + d, Event::ResultArrive { to: GATEWAY, job });
                }
            }
        }
        Ok(())
    }

    fn node_err(&self, node: NodeIdx, source: WorkerError) -> SimError {
        SimError::Node {
            node: self.nodes[node].id.clone(),
            source,
        }
    }

    fn job_index(&self, job_id: &str) -> usize {
        // ids are job-NNNNNN, 1-based
        job_id[4..].parse::<usize>().expect("simulated job id") - 1
    }

    fn decision_node(&self, job: usize) -> NodeIdx {
        let d = self.jobs[job].decision.as_ref().expect("decided");
        match d.scenario {
            Scenario::BrokerOnly => BROKER,
            Scenario::Cloud => CLOUD,
            Scenario::Worker => self
                .nodes
                .iter()
                .position(|n| n.id == d.node_id)
                .expect("arbitration picks a known worker"),
        }
    }

    fn arbitrate(&mut self, job: usize) {
        let broker = &self.nodes[BROKER];
        let ctx = ArbitrationContext {
            now_ms: self.now as u64,
            broker_queue_depth: broker.queue.len() + usize::from(broker.running.is_some()),
            cloud_available: !self.jobs[job].cloud_failed,
        };
        let a = broker::arbitrate(&self.jobs[job].request, &self.registry, &self.broker_cfg, ctx);
        let cost = broker::arbitration_cost_ms(a.load_checks, &self.broker_cfg);
        let j = &mut self.jobs[job];
        j.arbitration += cost;
        j.trace.scenario = a.decision.scenario;
        j.decision = Some(a.decision);
        self.schedule(self.now + cost, Event::DecisionReady { job });
    }

    fn ack(&self, job: usize, with_response: bool) -> JobAck {
        let j = &self.jobs[job];
        JobAck {
            job_id: j.request.job_id.clone(),
            decision: j.decision.clone().expect("decided"),
            arbitration_ms: j.arbitration,
            response: if with_response { j.response.clone() } else { None },
        }
    }

    fn dispatch(&mut self, job: usize) -> Result<(), SimError> {
        let scenario = self.jobs[job].decision.as_ref().expect("decided").scenario;
        match scenario {
            Scenario::Worker if !self.jobs[job].via_broker => {
                let body = protocol::encode(&self.ack(job, false));
                let d = self.send(BROKER, GATEWAY, FrameKind::Decision, body, Some(job));
                self.jobs[job].comm += d;
                self.schedule(self.now + d, Event::GatewayAck { job });
            }
            Scenario::Worker => {
                let target = self.decision_node(job);
                let body = protocol::encode(&self.jobs[job].request);
                let d = self.send(BROKER, target, FrameKind::Data, body, Some(job));
                self.jobs[job].comm += d;
                self.schedule(self.now + d, Event::DataArrive { node: target, job });
            }
            Scenario::BrokerOnly => {
                self.jobs[job].via_broker = true;
                self.accept_job(BROKER, job)?;
            }
            Scenario::Cloud => {
                self.jobs[job].via_broker = true;
                let body = protocol::encode(&self.jobs[job].request);
                let d = self.send(BROKER, CLOUD, FrameKind::CloudForward, body, Some(job));
                if self.cfg.cloud_down {
                    let wait = q(self.cfg.cloud_timeout_ms);
                    self.jobs[job].comm += wait;
                    self.schedule(self.now + wait, Event::CloudFail { job });
                } else {
                    self.jobs[job].comm += d;
                    self.schedule(self.now + d, Event::DataArrive { node: CLOUD, job });
                }
            }
        }
        Ok(())
    }

    /// Data reached the executing node: fan out when voting, then queue.
    fn accept_job(&mut self, node: NodeIdx, job: usize) -> Result<(), SimError> {
        let ensemble = self.jobs[job].decision.as_ref().is_some_and(|d| d.ensemble) && node != CLOUD;
        if ensemble {
            let peers: Vec<String> = (FIRST_WORKER..self.nodes.len())
                .filter(|&p| p != node)
                .map(|p| self.nodes[p].id.clone())
                .collect();
            let origin_id = self.nodes[node].id.clone();
            let frames = protocol::multicast_frame(
                &self.jobs[job].request.job_id,
                &self.jobs[job].request.payload,
                &origin_id,
                &origin_id,
                &peers,
            );
            let deadline = self.now + q(self.cfg.ensemble_timeout_ms);
            self.nodes[node]
                .collector
                .start(&self.jobs[job].request.job_id, frames.len(), deadline);
            self.jobs[job].vote = VoteParts {
                receipt: self.now,
                ..VoteParts::default()
            };
            for frame in frames {
                let peer = self.node_index(&frame.destination);
                let d = self.send(node, peer, FrameKind::Fanout, protocol::encode(&frame), Some(job));
                self.schedule(
                    self.now + d,
                    Event::FanoutArrive {
                        peer,
                        job,
                        origin: node,
                        out_ms: d,
                    },
                );
            }
            self.schedule(deadline, Event::EnsembleTimeout { node, job });
        }
        self.nodes[node]
            .queue
            .enqueue(Task::Primary { job }, self.now)
            .map_err(|e| self.node_err(node, e))?;
        self.try_start(node)
    }

    fn node_index(&self, id: &str) -> NodeIdx {
        self.nodes.iter().position(|n| n.id == id).expect("known node")
    }

    fn try_start(&mut self, node: NodeIdx) -> Result<(), SimError> {
        if self.nodes[node].running.is_some() {
            return Ok(());
        }
        let Some((task, queued_ms)) = self.nodes[node].queue.dequeue(self.now) else {
            return Ok(());
        };
        let job = match task {
            Task::Primary { job } | Task::Peer { job, .. } => job,
        };
        let engine = self.nodes[node].engine.expect("compute node has a model");
        let probs = engine
            .probabilities(&self.jobs[job].request.payload)
            .map_err(|e| self.node_err(node, e))?;
        let exec_ms = self.nodes[node].exec_ms;
        let (id, class) = (self.nodes[node].id.clone(), self.nodes[node].class);
        self.jobs[job].trace.usage_mut(&id, class).busy_ms += exec_ms;
        self.nodes[node].running = Some(Running {
            task,
            queued_ms,
            exec_ms,
            probs,
        });
        self.schedule(self.now + exec_ms, Event::ExecDone { node });
        Ok(())
    }

    fn exec_done(&mut self, node: NodeIdx) -> Result<(), SimError> {
        let run = self.nodes[node].running.take().expect("a task was running");
        match run.task {
            Task::Peer { job, origin, out_ms } => {
                let reply = EnsembleReply {
                    job_id: self.jobs[job].request.job_id.clone(),
                    node_id: self.nodes[node].id.clone(),
                    p0: run.probs.0,
                    p1: run.probs.1,
                    queuing_ms: run.queued_ms,
                    execution_ms: run.exec_ms,
                };
                let d = self.send(node, origin, FrameKind::EnsembleReply, protocol::encode(&reply), Some(job));
                self.schedule(
                    self.now + d,
                    Event::ReplyArrive {
                        origin,
                        reply,
                        path_ms: out_ms + d,
                    },
                );
            }
            Task::Primary { job } => {
                let id = self.jobs[job].request.job_id.clone();
                if self.nodes[node].collector.is_pending(&id) {
                    self.nodes[node]
                        .collector
                        .set_local(&id, run.probs)
                        .map_err(|e| self.node_err(node, e))?;
                    self.jobs[job].vote.local = Some((run.queued_ms, run.exec_ms));
                    if self.jobs[job].vote.deadline_passed || self.nodes[node].collector.is_complete(&id) {
                        self.finish_vote(node, job)?;
                    }
                } else {
                    let result = PredictionResult::single(run.probs.0, run.probs.1)
                        .map_err(|e| self.node_err(node, e.into()))?;
                    let j = &mut self.jobs[job];
                    j.queuing += run.queued_ms;
                    j.execution += run.exec_ms;
                    j.result = Some((result, false, self.nodes[node].id.clone()));
                    self.respond(node, job);
                }
            }
        }
        self.try_start(node)
    }

    /// Closes an ensemble vote and charges the critical path to the job.
    fn finish_vote(&mut self, node: NodeIdx, job: usize) -> Result<(), SimError> {
        let id = self.jobs[job].request.job_id.clone();
        let outcome = self.nodes[node]
            .collector
            .finish(&id)
            .map_err(|e| self.node_err(node, e))?;
        let now = self.now;
        let j = &mut self.jobs[job];
        let (lq, le) = j.vote.local.expect("local vote present");
        let local_end = j.vote.receipt + lq + le;
        let last_reply = j
            .vote
            .replies
            .iter()
            .copied()
            .max_by(|a, b| a.3.total_cmp(&b.3));
        match last_reply {
            Some((net, rq, re, at)) if at == now && at >= local_end => {
                j.comm += net;
                j.queuing += rq;
                j.execution += re;
            }
            _ => {
                j.queuing += lq;
                j.execution += le;
                // waiting for stragglers until the deadline counts as communication
                j.comm += now - local_end;
            }
        }
        j.trace.partial = outcome.partial;
        j.result = Some((outcome.result, outcome.partial, self.nodes[node].id.clone()));
        self.respond(node, job);
        Ok(())
    }

    fn respond(&mut self, node: NodeIdx, job: usize) {
        let (result, partial, handled_by) = self.jobs[job].result.clone().expect("result ready");
        let scenario = self.jobs[job].trace.scenario;
        let mut response = JobResponse::from_prediction(
            &self.jobs[job].request.job_id,
            &result,
            self.cfg.gate_threshold,
            &handled_by,
            scenario,
        );
        response.partial = partial;
        response.fallback = self.jobs[job].fallback;
        response.timings.arbitration_ms = self.jobs[job].arbitration;
        response.timings.queuing_ms = self.jobs[job].queuing;
        response.timings.execution_ms = self.jobs[job].execution;
        self.jobs[job].response = Some(response.clone());
        let body = protocol::encode(&response);
        if node == BROKER {
            // result leaves the broker inside the job ack
            let body = protocol::encode(&self.ack(job, true));
            let d = self.send(BROKER, GATEWAY, FrameKind::Response, body, Some(job));
            self.jobs[job].comm += d;
            self.schedule(self.now + d, Event::ResultArrive { to: GATEWAY, job });
        } else if self.jobs[job].via_broker {
            let d = self.send(node, BROKER, FrameKind::Response, body, Some(job));
            self.jobs[job].comm += d;
            self.schedule(self.now + d, Event::ResultArrive { to: BROKER, job });
        } else {
            let d = self.send(node, GATEWAY, FrameKind::Response, body, Some(job));
            self.jobs[job].comm += d;
            self.schedule(self.now + d, Event::ResultArrive { to: GATEWAY, job });
        }
    }

    fn complete(&mut self, job: usize) {
        let now = self.now;
        let j = &mut self.jobs[job];
        if j.done {
            return;
        }
        j.done = true;
        let response_ms = now - j.trace.submitted_at_ms;
        j.trace.arbitration_ms = Some(j.arbitration);
        j.trace.comm_ms = Some(j.comm);
        j.trace.queuing_ms = Some(j.queuing);
        j.trace.execution_ms = Some(j.execution);
        j.trace.response_ms = Some(response_ms);
        if let Some(r) = j.response.as_mut() {
            r.timings = crate::protocol::Timings {
                arbitration_ms: j.arbitration,
                comm_ms: j.comm,
                queuing_ms: j.queuing,
                execution_ms: j.execution,
                response_ms,
            };
        }
        self.remaining -= 1;
    }
}

/// Serializes traces as JSON; byte-identical for identical runs.
pub fn traces_to_json(traces: &[JobTrace]) -> String {
    serde_json::to_string_pretty(traces).expect("traces serialize")
}
