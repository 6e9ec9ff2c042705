//! HTTP nodes: workers, the cloud node and the broker.
//!
//! Every node that runs inference owns a [`WorkerCore`]: one serial executor
//! in front of the model plus the ensemble vote collector. The broker embeds
//! one to serve BrokerOnly jobs.

pub mod broker;
pub mod worker;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Notify};

use healthfog_core::ensemble::PredictionResult;
use healthfog_core::protocol::{
    self, EnsembleFanout, EnsembleReply, Heartbeat, JobRequest, JobResponse, Message, NodeInfo, ProtocolError,
    Scenario, EP_ENSEMBLE, EP_ENSEMBLE_REPLY, EP_NODES,
};
use healthfog_core::worker::{EnsembleCollector, InferenceEngine, JobQueue, ReplyOutcome, WorkerError};

/// Wall clock in milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// An error answered as `{"error": ...}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(msg: impl ToString) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: msg.to_string(),
        }
    }

    pub fn unavailable(msg: impl ToString) -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: msg.to_string(),
        }
    }

    pub fn bad_gateway(msg: impl ToString) -> Self {
        Self {
            status: StatusCode::BAD_GATEWAY,
            message: msg.to_string(),
        }
    }

    pub fn internal(msg: impl ToString) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: msg.to_string(),
        }
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        Self::bad_request(e)
    }
}

impl From<WorkerError> for ApiError {
    fn from(e: WorkerError) -> Self {
        match e {
            WorkerError::Protocol(p) => Self::bad_request(p),
            WorkerError::QueueFull(_) => Self::unavailable(e),
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            [(header::CONTENT_TYPE, "application/json")],
            protocol::error_body(&self.message),
        )
            .into_response()
    }
}

/// A JSON body encoded with the protocol codec, so sizes match byte accounting.
pub struct Json(pub String);

impl Json {
    pub fn of<T: serde::Serialize>(msg: &T) -> Self {
        Self(protocol::encode(msg))
    }
}

impl IntoResponse for Json {
    fn into_response(self) -> Response {
        ([(header::CONTENT_TYPE, "application/json")], self.0).into_response()
    }
}

pub fn decode_body<T: Message>(body: &str) -> Result<T, ApiError> {
    protocol::decode(body).map_err(ApiError::from)
}

/// POSTs a protocol message and decodes the reply; non-2xx replies become errors
/// carrying the remote error text.
pub async fn post_json<T: Message>(
    http: &reqwest::Client,
    url: &str,
    body: String,
    timeout: Option<Duration>,
) -> Result<(T, usize), RemoteError> {
    let mut req = http
        .post(url)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body);
    if let Some(t) = timeout {
        req = req.timeout(t);
    }
    let resp = req.send().await.map_err(|e| RemoteError::Unreachable(format!("{url}: {e}")))?;
    read_reply(url, resp).await
}

pub async fn get_json<T: Message>(
    http: &reqwest::Client,
    url: &str,
    timeout: Option<Duration>,
) -> Result<(T, usize), RemoteError> {
    let mut req = http.get(url);
    if let Some(t) = timeout {
        req = req.timeout(t);
    }
    let resp = req.send().await.map_err(|e| RemoteError::Unreachable(format!("{url}: {e}")))?;
    read_reply(url, resp).await
}

async fn read_reply<T: Message>(url: &str, resp: reqwest::Response) -> Result<(T, usize), RemoteError> {
    let status = resp.status();
    let text = resp
        .text()
        .await
        .map_err(|e| RemoteError::Unreachable(format!("{url}: {e}")))?;
    if !status.is_success() {
        let message = protocol::decode::<protocol::ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text.clone());
        return Err(RemoteError::Status {
            status: status.as_u16(),
            message,
        });
    }
    let len = text.len();
    let msg = protocol::decode(&text).map_err(|e| RemoteError::Protocol(format!("{url}: {e}")))?;
    Ok((msg, len))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RemoteError {
    #[error("cannot reach {0}")]
    Unreachable(String),
    #[error("remote error {status}: {message}")]
    Status { status: u16, message: String },
    #[error("bad reply from {0}")]
    Protocol(String),
}

pub fn join_url(base: &str, path: &str) -> String {
    format!("{}{}", base.trim_end_matches('/'), path)
}

/// Result of one job on the serial executor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOutcome {
    pub probs: (f64, f64),
    pub queued_ms: f64,
    pub exec_ms: f64,
}

struct QueuedJob {
    payload: String,
    done: oneshot::Sender<Result<ExecOutcome, WorkerError>>,
}

/// One job at a time, in arrival order, on a dedicated task.
pub struct Executor {
    engine: InferenceEngine,
    queue: Mutex<JobQueue<QueuedJob>>,
    wake: Notify,
    running: AtomicBool,
    busy_us: AtomicU64,
    extra_exec: Duration,
    epoch: Instant,
}

impl Executor {
    pub fn spawn(engine: InferenceEngine, capacity: usize, extra_exec: Duration) -> Arc<Self> {
        let exec = Arc::new(Self {
            engine,
            queue: Mutex::new(JobQueue::new(capacity)),
            wake: Notify::new(),
            running: AtomicBool::new(false),
            busy_us: AtomicU64::new(0),
            extra_exec,
            epoch: Instant::now(),
        });
        tokio::spawn(Arc::clone(&exec).run_loop());
        exec
    }

    fn clock(&self) -> f64 {
        ms(self.epoch.elapsed())
    }

    async fn run_loop(self: Arc<Self>) {
        loop {
            let next = self.queue.lock().expect("queue lock").dequeue(self.clock());
            let Some((job, queued_ms)) = next else {
                self.wake.notified().await;
                continue;
            };
            self.running.store(true, Ordering::SeqCst);
            let start = Instant::now();
            let probs = self.engine.probabilities(&job.payload);
            if !self.extra_exec.is_zero() {
                tokio::time::sleep(self.extra_exec).await;
            }
            let took = start.elapsed();
            self.busy_us.fetch_add(took.as_micros() as u64, Ordering::SeqCst);
            self.running.store(false, Ordering::SeqCst);
            let _ = job.done.send(probs.map(|probs| ExecOutcome {
                probs,
                queued_ms,
                exec_ms: ms(took),
            }));
        }
    }

    /// Queues `payload` and waits for its turn. Malformed payloads are
    /// rejected before queuing.
    pub async fn run(&self, payload: &str) -> Result<ExecOutcome, WorkerError> {
        protocol::parse_payload(payload)?;
        let (tx, rx) = oneshot::channel();
        self.queue.lock().expect("queue lock").enqueue(
            QueuedJob {
                payload: payload.to_string(),
                done: tx,
            },
            self.clock(),
        )?;
        self.wake.notify_one();
        rx.await
            .unwrap_or_else(|_| Err(WorkerError::UnknownJob("executor stopped".into())))
    }

    /// Jobs waiting or running.
    pub fn depth(&self) -> usize {
        self.queue.lock().expect("queue lock").len() + usize::from(self.running.load(Ordering::SeqCst))
    }

    pub fn busy_ms(&self) -> f64 {
        self.busy_us.load(Ordering::SeqCst) as f64 / 1000.0
    }
}

/// Reported load: executor utilization since the last heartbeat plus
/// `load_per_job` for every job waiting or running, capped at 1.
pub struct LoadMeter {
    last: Mutex<(Instant, f64)>,
    load_per_job: f64,
}

impl LoadMeter {
    pub fn new(load_per_job: f64) -> Self {
        Self {
            last: Mutex::new((Instant::now(), 0.0)),
            load_per_job,
        }
    }

    fn compute(&self, exec: &Executor, reset: bool) -> f64 {
        let mut last = self.last.lock().expect("load lock");
        let (at, busy) = *last;
        let wall = ms(at.elapsed());
        let now_busy = exec.busy_ms();
        let util = if wall > 0.0 { ((now_busy - busy) / wall).clamp(0.0, 1.0) } else { 0.0 };
        if reset {
            *last = (Instant::now(), now_busy);
        }
        (util + self.load_per_job * exec.depth() as f64).min(1.0)
    }

    pub fn sample(&self, exec: &Executor) -> f64 {
        self.compute(exec, true)
    }

    pub fn peek(&self, exec: &Executor) -> f64 {
        self.compute(exec, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Peer {
    pub node_id: String,
    pub address: String,
}

/// Parses `id=url,id=url`.
pub fn parse_peers(text: &str) -> Result<Vec<Peer>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (id, url) = item
                .split_once('=')
                .ok_or_else(|| format!("peer {item:?} is not id=url"))?;
            Ok(Peer {
                node_id: id.trim().to_string(),
                address: url.trim().to_string(),
            })
        })
        .collect()
}

/// Inference node state shared by workers, the cloud node and the broker.
pub struct WorkerCore {
    pub node_id: String,
    /// Base URL peers use to reach this node.
    pub address: Mutex<String>,
    pub scenario: Scenario,
    pub executor: Arc<Executor>,
    pub load: LoadMeter,
    collector: Mutex<EnsembleCollector>,
    votes: Notify,
    pub ensemble_timeout: Duration,
    pub gate_threshold: f64,
    pub http: reqwest::Client,
}

#[derive(Debug, Clone)]
pub struct CoreConfig {
    pub node_id: String,
    pub scenario: Scenario,
    pub queue_capacity: usize,
    pub extra_exec: Duration,
    pub load_per_job: f64,
    pub ensemble_timeout: Duration,
    pub gate_threshold: f64,
}

impl WorkerCore {
    pub fn new(cfg: CoreConfig, engine: InferenceEngine, http: reqwest::Client) -> Arc<Self> {
        Arc::new(Self {
            address: Mutex::new(String::new()),
            node_id: cfg.node_id,
            scenario: cfg.scenario,
            executor: Executor::spawn(engine, cfg.queue_capacity, cfg.extra_exec),
            load: LoadMeter::new(cfg.load_per_job),
            collector: Mutex::new(EnsembleCollector::new()),
            votes: Notify::new(),
            ensemble_timeout: cfg.ensemble_timeout,
            gate_threshold: cfg.gate_threshold,
            http,
        })
    }

    pub fn address(&self) -> String {
        self.address.lock().expect("address lock").clone()
    }

    pub fn heartbeat(&self, reset: bool) -> Heartbeat {
        let cpu_load = if reset {
            self.load.sample(&self.executor)
        } else {
            self.load.peek(&self.executor)
        };
        Heartbeat {
            node_id: self.node_id.clone(),
            cpu_load,
            queue_depth: self.executor.depth() as u32,
            sent_at: now_ms(),
            address: Some(self.address()),
        }
    }

    fn respond(&self, job_id: &str, result: &PredictionResult, local: ExecOutcome) -> JobResponse {
        let mut r = JobResponse::from_prediction(job_id, result, self.gate_threshold, &self.node_id, self.scenario);
        r.timings.queuing_ms = local.queued_ms;
        r.timings.execution_ms = local.exec_ms;
        r
    }

    /// Runs a job here; with `ensemble`, fans out to `peers` and votes.
    pub async fn handle_job(&self, job: &JobRequest, peers: &[Peer]) -> Result<JobResponse, ApiError> {
        if !job.ensemble {
            let out = self.executor.run(&job.payload).await?;
            let result = PredictionResult::single(out.probs.0, out.probs.1).map_err(ApiError::internal)?;
            return Ok(self.respond(&job.job_id, &result, out));
        }
        self.run_ensemble(job, peers).await
    }

    async fn run_ensemble(&self, job: &JobRequest, peers: &[Peer]) -> Result<JobResponse, ApiError> {
        protocol::parse_payload(&job.payload)?;
        let peers: Vec<&Peer> = peers.iter().filter(|p| p.node_id != self.node_id).collect();
        let deadline = Instant::now() + self.ensemble_timeout;
        let deadline_ms = now_ms() as f64 + ms(self.ensemble_timeout);
        self.collector
            .lock()
            .expect("collector lock")
            .start(&job.job_id, peers.len(), deadline_ms);
        let me = self.address();
        let fanout = async {
            let sends = peers.iter().map(|p| {
                let frame = EnsembleFanout {
                    job_id: job.job_id.clone(),
                    payload: job.payload.clone(),
                    origin: self.node_id.clone(),
                    reply_to: me.clone(),
                    destination: p.node_id.clone(),
                };
                let url = join_url(&p.address, EP_ENSEMBLE);
                let http = self.http.clone();
                async move {
                    http.post(url)
                        .header(header::CONTENT_TYPE, "application/json")
                        .body(protocol::encode(&frame))
                        .timeout(Duration::from_secs(2))
                        .send()
                        .await
                        .ok()
                        .filter(|r| r.status().is_success())
                        .is_none()
                }
            });
            futures::future::join_all(sends).await.into_iter().filter(|failed| *failed).count()
        };
        let (failed, local) = tokio::join!(fanout, self.executor.run(&job.payload));
        let local = match local {
            Ok(l) => l,
            Err(e) => {
                let _ = self.collector.lock().expect("collector lock").finish(&job.job_id);
                return Err(e.into());
            }
        };
        self.collector
            .lock()
            .expect("collector lock")
            .set_local(&job.job_id, local.probs)?;
        let reachable = peers.len() - failed;
        loop {
            let notified = self.votes.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let replies = self
                .collector
                .lock()
                .expect("collector lock")
                .reply_count(&job.job_id)
                .unwrap_or(0);
            if replies >= reachable {
                break;
            }
            tokio::select! {
                _ = notified => {}
                _ = tokio::time::sleep_until(deadline.into()) => break,
            }
        }
        let outcome = self.collector.lock().expect("collector lock").finish(&job.job_id)?;
        let mut r = self.respond(&job.job_id, &outcome.result, local);
        r.partial = outcome.partial;
        Ok(r)
    }

    /// Peer side of a vote: answer immediately, run the job, reply later.
    pub fn accept_fanout(self: &Arc<Self>, frame: EnsembleFanout) {
        let core = Arc::clone(self);
        tokio::spawn(async move {
            let Ok(out) = core.executor.run(&frame.payload).await else {
                return;
            };
            let reply = EnsembleReply {
                job_id: frame.job_id,
                node_id: core.node_id.clone(),
                p0: out.probs.0,
                p1: out.probs.1,
                queuing_ms: out.queued_ms,
                execution_ms: out.exec_ms,
            };
            let url = join_url(&frame.reply_to, EP_ENSEMBLE_REPLY);
            let sent = core
                .http
                .post(&url)
                .header(header::CONTENT_TYPE, "application/json")
                .body(protocol::encode(&reply))
                .timeout(Duration::from_secs(5))
                .send()
                .await;
            if let Err(e) = sent {
                tracing::warn!(%url, error = %e, "ensemble reply not delivered");
            }
        });
    }

    pub fn accept_reply(&self, reply: EnsembleReply) -> ReplyOutcome {
        let outcome = self
            .collector
            .lock()
            .expect("collector lock")
            .add_reply(reply, now_ms() as f64);
        self.votes.notify_waiters();
        outcome
    }

    /// Live, non-quarantined peers as the broker sees them.
    pub async fn peers_from_broker(&self, broker: &str) -> Vec<Peer> {
        match get_json::<Vec<NodeInfo>>(&self.http, &join_url(broker, EP_NODES), Some(Duration::from_secs(2))).await {
            Ok((nodes, _)) => nodes
                .into_iter()
                .filter(|n| n.live && !n.quarantined && n.node_id != self.node_id)
                .map(|n| Peer {
                    node_id: n.node_id,
                    address: n.address,
                })
                .collect(),
            Err(e) => {
                tracing::warn!(error = %e, "peer discovery failed; voting alone");
                Vec::new()
            }
        }
    }
}

/// A node serving on a bound socket until dropped or shut down.
pub struct RunningNode {
    pub addr: SocketAddr,
    pub url: String,
    shutdown: Option<oneshot::Sender<()>>,
    pub handle: tokio::task::JoinHandle<()>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl RunningNode {
    pub(crate) fn new(
        addr: SocketAddr,
        shutdown: oneshot::Sender<()>,
        handle: tokio::task::JoinHandle<()>,
        tasks: Vec<tokio::task::JoinHandle<()>>,
    ) -> Self {
        Self {
            addr,
            url: format!("http://{addr}"),
            shutdown: Some(shutdown),
            handle,
            tasks,
        }
    }

    pub async fn stop(mut self) {
        self.halt();
        let _ = (&mut self.handle).await;
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for t in &self.tasks {
            t.abort();
        }
    }

    pub async fn wait(mut self) {
        let _ = (&mut self.handle).await;
    }
}

impl Drop for RunningNode {
    fn drop(&mut self) {
        self.halt();
    }
}

pub(crate) async fn serve(listener: TcpListener, app: axum::Router) -> (SocketAddr, oneshot::Sender<()>, tokio::task::JoinHandle<()>) {
    let addr = listener.local_addr().expect("bound listener has an address");
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    (addr, tx, handle)
}

pub async fn bind(listen: &str) -> std::io::Result<TcpListener> {
    TcpListener::bind(listen).await
}
