//! Worker-side job handling: local inference, the FIFO job queue and the
//! collection of ensemble votes from peers.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::ensemble::{self, EnsembleError, PredictionResult};
use crate::heartdata::NormStats;
use crate::neuralnet::{MlpModel, NnError};
use crate::protocol::{self, EnsembleReply, ProtocolError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkerError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("job queue full ({0} jobs)")]
    QueueFull(usize),
    #[error("no ensemble vote pending for job {0}")]
    UnknownJob(String),
}

/// A loaded model with its normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceEngine {
    pub node_id: String,
    pub model: MlpModel,
    pub stats: NormStats,
}

impl InferenceEngine {
    pub fn new(node_id: impl Into<String>, model: MlpModel, stats: NormStats) -> Self {
        Self {
            node_id: node_id.into(),
            model,
            stats,
        }
    }

    /// Class probabilities for a 13-field CSV payload.
    pub fn probabilities(&self, payload: &str) -> Result<(f64, f64), WorkerError> {
        let record = protocol::parse_payload(payload)?;
        let x = self.stats.normalize(&record);
        Ok(self.model.predict_proba(&x)?)
    }

    /// Parse, normalize, forward pass and confidence for one payload.
    pub fn execute_local(&self, payload: &str) -> Result<PredictionResult, WorkerError> {
        let (p0, p1) = self.probabilities(payload)?;
        Ok(PredictionResult::single(p0, p1)?)
    }
}

/// Bounded FIFO that records when each job entered.
#[derive(Debug, Clone)]
pub struct JobQueue<T> {
    items: VecDeque<(T, f64)>,
    capacity: usize,
}

impl<T> JobQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::new(),
            capacity,
        }
    }

    pub fn enqueue(&mut self, job: T, now_ms: f64) -> Result<(), WorkerError> {
        if self.items.len() >= self.capacity {
            return Err(WorkerError::QueueFull(self.capacity));
        }
        self.items.push_back((job, now_ms));
        Ok(())
    }

    /// Oldest job and its queuing delay (`now_ms - enqueue time`).
    pub fn dequeue(&mut self, now_ms: f64) -> Option<(T, f64)> {
        self.items
            .pop_front()
            .map(|(job, at)| (job, (now_ms - at).max(0.0)))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PendingVote {
    local: Option<(f64, f64)>,
    replies: Vec<EnsembleReply>,
    expected_peers: usize,
    deadline_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyOutcome {
    Accepted,
    /// Duplicate reply from a node that already voted.
    Duplicate,
    /// No vote is open for the job (finished, timed out or never started).
    Discarded,
}

/// Outcome of an ensemble vote at the origin worker.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub result: PredictionResult,
    /// Fewer replies than peers were counted.
    pub partial: bool,
    /// Replies included in the vote, in arrival order.
    pub replies: Vec<EnsembleReply>,
}

/// Open ensemble votes at an origin worker, keyed by job id.
#[derive(Debug, Clone, Default)]
pub struct EnsembleCollector {
    pending: BTreeMap<String, PendingVote>,
}

impl EnsembleCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start(&mut self, job_id: &str, expected_peers: usize, deadline_ms: f64) {
        self.pending.insert(
            job_id.to_string(),
            PendingVote {
                local: None,
                replies: Vec::new(),
                expected_peers,
                deadline_ms,
            },
        );
    }

    pub fn set_local(&mut self, job_id: &str, probs: (f64, f64)) -> Result<(), WorkerError> {
        let p = self
            .pending
            .get_mut(job_id)
            .ok_or_else(|| WorkerError::UnknownJob(job_id.to_string()))?;
        p.local = Some(probs);
        Ok(())
    }

    /// Records a peer reply unless it arrives after the deadline or after the
    /// vote was closed.
    pub fn add_reply(&mut self, reply: EnsembleReply, now_ms: f64) -> ReplyOutcome {
        let Some(p) = self.pending.get_mut(&reply.job_id) else {
            return ReplyOutcome::Discarded;
        };
        if now_ms > p.deadline_ms {
            return ReplyOutcome::Discarded;
        }
        if p.replies.iter().any(|r| r.node_id == reply.node_id) {
            return ReplyOutcome::Duplicate;
        }
        p.replies.push(reply);
        ReplyOutcome::Accepted
    }

    /// True once the local result and every expected reply are in.
    pub fn is_complete(&self, job_id: &str) -> bool {
        self.pending
            .get(job_id)
            .is_some_and(|p| p.local.is_some() && p.replies.len() >= p.expected_peers)
    }

    pub fn deadline(&self, job_id: &str) -> Option<f64> {
        self.pending.get(job_id).map(|p| p.deadline_ms)
    }

    /// Replies accepted so far for an open vote.
    pub fn reply_count(&self, job_id: &str) -> Option<usize> {
        self.pending.get(job_id).map(|p| p.replies.len())
    }

    pub fn is_pending(&self, job_id: &str) -> bool {
        self.pending.contains_key(job_id)
    }

    /// Closes the vote. Later replies for this job are discarded.
    pub fn finish(&mut self, job_id: &str) -> Result<EnsembleOutcome, WorkerError> {
        let p = self
            .pending
            .remove(job_id)
            .ok_or_else(|| WorkerError::UnknownJob(job_id.to_string()))?;
        let local = p
            .local
            .ok_or_else(|| WorkerError::UnknownJob(job_id.to_string()))?;
        let mut probs = Vec::with_capacity(p.replies.len() + 1);
        probs.push(local);
        probs.extend(p.replies.iter().map(|r| (r.p0, r.p1)));
        let result = ensemble::vote(&probs)?;
        Ok(EnsembleOutcome {
            result,
            partial: p.replies.len() < p.expected_peers,
            replies: p.replies,
        })
    }
}
