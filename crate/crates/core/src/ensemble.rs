//! Bagged ensembles: shard the training data across members, train each member
//! independently, and combine predictions by majority vote.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::neuralnet::{self, argmax_pair, MlpModel, NnError, Sample, TrainConfig, TrainHistory};

/// Confidence below which a diagnosis is flagged for a doctor's review.
pub const DEFAULT_GATE_THRESHOLD: f64 = 50.0;

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("member_seeds has {got} entries for {expected} members")]
    SeedCount { expected: usize, got: usize },
    #[error("member seeds must be distinct")]
    DuplicateSeeds,
    #[error("cannot split {records} records into {members} equal shards")]
    TooFewRecords { records: usize, members: usize },
    #[error("member {index}: {source}")]
    Member { index: usize, source: NnError },
    #[error("cannot vote over an empty list of member results")]
    EmptyVote,
    #[error("invalid probabilities ({0}, {1})")]
    InvalidProbabilities(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Disjoint shards of near-equal size after a seeded shuffle.
    Equal,
    /// One with-replacement sample of the full training-set size per member.
    Bootstrap,
}

impl core::str::FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "equal" => Ok(Self::Equal),
            "bootstrap" => Ok(Self::Bootstrap),
            other => Err(alloc::format!(
                "unknown distribution {other:?} (expected equal or bootstrap)"
            )),
        }
    }
}

impl core::fmt::Display for Distribution {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Equal => "equal",
            Self::Bootstrap => "bootstrap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_members: usize,
    pub distribution: Distribution,
    pub member_seeds: Vec<u64>,
}

impl EnsembleSpec {
    /// Members get consecutive seeds starting at `base_seed`.
    pub fn new(n_members: usize, distribution: Distribution, base_seed: u64) -> Self {
        Self {
            n_members,
            distribution,
            member_seeds: (0..n_members as u64).map(|i| base_seed.wrapping_add(i)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n_members == 0 {
            return Err(EnsembleError::NoMembers);
        }
        if self.member_seeds.len() != self.n_members {
            return Err(EnsembleError::SeedCount {
                expected: self.n_members,
                got: self.member_seeds.len(),
            });
        }
        let mut seeds = self.member_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.n_members {
            return Err(EnsembleError::DuplicateSeeds);
        }
        Ok(())
    }
}

/// Splits `train` into one training set per member.
///
/// With a single member under [`Distribution::Equal`] the input is returned
/// unchanged (same order).
pub fn distribute_data<T: Clone>(
    train: &[T],
    spec: &EnsembleSpec,
) -> Result<Vec<Vec<T>>, EnsembleError> {
    spec.validate()?;
    let n = spec.n_members;
    match spec.distribution {
        Distribution::Equal => {
            if n > train.len() {
                return Err(EnsembleError::TooFewRecords {
                    records: train.len(),
                    members: n,
                });
            }
            if n == 1 {
                return Ok(alloc::vec![train.to_vec()]);
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.member_seeds[0]));
            let base = train.len() / n;
            let extra = train.len() % n;
            let mut shards = Vec::with_capacity(n);
            let mut start = 0;
            for i in 0..n {
                let len = base + usize::from(i < extra);
                shards.push(order[start..start + len].iter().map(|&j| train[j].clone()).collect());
                start += len;
            }
            Ok(shards)
        }
        Distribution::Bootstrap => Ok(spec
            .member_seeds
            .iter()
            .map(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..train.len())
                    .map(|_| train[rng.gen_range(0..train.len())].clone())
                    .collect()
            })
            .collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMember {
    pub model: MlpModel,
    pub history: TrainHistory,
    pub seed: u64,
    pub shard_size: usize,
}

/// Trains one member: weights initialized and batches shuffled from `seed`.
pub fn train_member(
    shard: &[Sample],
    val: &[Sample],
    seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainedMember, NnError> {
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let (model, history) = neuralnet::train(&neuralnet::init_model(seed), shard, val, &cfg)?;
    Ok(TrainedMember {
        model,
        history,
        seed,
        shard_size: shard.len(),
    })
}

/// Serial ensemble training; member `i` uses shard `i` and `member_seeds[i]`.
pub fn train_ensemble(
    train: &[Sample],
    val: &[Sample],
    spec: &EnsembleSpec,
    cfg: &TrainConfig,
) -> Result<Vec<TrainedMember>, EnsembleError> {
    let shards = distribute_data(train, spec)?;
    shards
        .iter()
        .zip(&spec.member_seeds)
        .enumerate()
        .map(|(index, (shard, &seed))| {
            train_member(shard, val, seed, cfg).map_err(|source| EnsembleError::Member { index, source })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    Reliable,
    ConsultDoctor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub class: u8,
    pub p0: f64,
    pub p1: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_votes: Option<Vec<u8>>,
}

impl PredictionResult {
    /// Result of a single model: class is the argmax, ties to class 1.
    pub fn single(p0: f64, p1: f64) -> Result<Self, EnsembleError> {
        Ok(Self {
            class: argmax_pair(p0, p1) as u8,
            p0,
            p1,
            confidence: confidence(p0, p1)?,
            member_votes: None,
        })
    }

    pub fn gate(&self, threshold: f64) -> Gate {
        gate(self.confidence, threshold)
    }
}

fn check_probs(p0: f64, p1: f64) -> Result<(), EnsembleError> {
    let ok = p0.is_finite()
        && p1.is_finite()
        && (0.0..=1.0).contains(&p0)
        && (0.0..=1.0).contains(&p1)
        && (p0 + p1 - 1.0).abs() <= PROB_TOLERANCE;
    if ok {
        Ok(())
    } else {
        Err(EnsembleError::InvalidProbabilities(p0, p1))
    }
}

/// `100 * (2 * max(p0, p1) - 1)`, in [0, 100].
pub fn confidence(p0: f64, p1: f64) -> Result<f64, EnsembleError> {
    check_probs(p0, p1)?;
    Ok((100.0 * (2.0 * p0.max(p1) - 1.0)).clamp(0.0, 100.0))
}

/// `ConsultDoctor` iff confidence is strictly below the threshold.
pub fn gate(confidence: f64, threshold: f64) -> Gate {
    if confidence < threshold {
        Gate::ConsultDoctor
    } else {
        Gate::Reliable
    }
}

/// Majority vote over member probabilities.
///
/// Each member votes for its argmax class (a tie votes 1); an even split of
/// votes also goes to class 1. The reported probabilities are the member mean
/// and only feed the confidence score, so the class can disagree with the
/// argmax of the mean.
pub fn vote(member_probs: &[(f64, f64)]) -> Result<PredictionResult, EnsembleError> {
    if member_probs.is_empty() {
        return Err(EnsembleError::EmptyVote);
    }
    let mut votes = Vec::with_capacity(member_probs.len());
    let (mut s0, mut s1) = (0.0, 0.0);
    for &(p0, p1) in member_probs {
        check_probs(p0, p1)?;
        votes.push(argmax_pair(p0, p1) as u8);
        s0 += p0;
        s1 += p1;
    }
    let n = member_probs.len() as f64;
    let ones = votes.iter().filter(|&&v| v == 1).count();
    let class = u8::from(2 * ones >= votes.len());
    let (p0, p1) = (s0 / n, s1 / n);
    Ok(PredictionResult {
        class,
        p0,
        p1,
        confidence: confidence(p0, p1)?,
        member_votes: Some(votes),
    })
}

/// Runs every member on `x` and votes.
pub fn predict_ensemble<'a, I>(models: I, x: &[f64]) -> Result<PredictionResult, EnsembleError>
where
    I: IntoIterator<Item = &'a MlpModel>,
{
    let probs = models
        .into_iter()
        .enumerate()
        .map(|(index, m)| m.predict_proba(x).map_err(|source| EnsembleError::Member { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    vote(&probs)
}

/// Ensemble manifest written next to the member model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub version: u32,
    pub distribution: Distribution,
    pub norm_stats: String,
    pub members: Vec<ManifestMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub model: String,
    pub seed: u64,
    pub shard_size: usize,
}
