//! Accuracy studies over ensemble sizes and node-count sweeps that combine
//! trained members with simulated timings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ensemble::{self, Distribution, EnsembleError, EnsembleSpec, TrainedMember};
use crate::heartdata::{fit_norm, split_dataset, to_samples, DataError, NormStats, PatientRecord};
use crate::metrics::{EnergyModel, TimingSummary};
use crate::neuralnet::{Sample, TrainConfig};
use crate::sim::{self, NodeModels, SimConfig, SimError, BROKER_ID, CLOUD_ID};
use crate::worker::InferenceEngine;

/// Anything that turns a training set into ensemble members. The serial
/// [`ensemble::train_ensemble`] qualifies; the std crate adds a parallel one.
pub trait Trainer {
    fn train(
        &self,
        train: &[Sample],
        val: &[Sample],
        spec: &EnsembleSpec,
        cfg: &TrainConfig,
    ) -> Result<Vec<TrainedMember>, EnsembleError>;
}

pub struct SerialTrainer;

impl Trainer for SerialTrainer {
    fn train(
        &self,
        train: &[Sample],
        val: &[Sample],
        spec: &EnsembleSpec,
        cfg: &TrainConfig,
    ) -> Result<Vec<TrainedMember>, EnsembleError> {
        ensemble::train_ensemble(train, val, spec, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Member seeds for split seed `s` start at `s * MEMBER_SEED_STRIDE`.
pub const MEMBER_SEED_STRIDE: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub train: TrainConfig,
    pub distribution: Distribution,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            distribution: Distribution::Equal,
        }
    }
}

/// A trained ensemble for one (split seed, member count) pair.
#[derive(Debug, Clone)]
pub struct TrainedSet {
    pub split_seed: u64,
    pub stats: NormStats,
    pub members: Vec<TrainedMember>,
    pub shards: Vec<Vec<Sample>>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub split_seed: u64,
    pub n_members: usize,
    /// Mean over members of each member's accuracy on its own shard.
    pub member_train_mean: f64,
    /// Mean over members of test-set accuracy.
    pub member_test_mean: f64,
    /// Majority vote accuracy on the whole training split.
    pub ensemble_train: f64,
    /// Majority vote accuracy on the test split.
    pub ensemble_test: f64,
}

pub fn train_set(
    records: &[PatientRecord],
    split_seed: u64,
    n_members: usize,
    cfg: &StudyConfig,
    trainer: &dyn Trainer,
) -> Result<TrainedSet, SweepError> {
    let split = split_dataset(records, split_seed)?;
    let stats = fit_norm(&split.train)?;
    let train = to_samples(&split.train, &stats);
    let val = to_samples(&split.validation, &stats);
    let test = to_samples(&split.test, &stats);
    let spec = EnsembleSpec::new(n_members, cfg.distribution, split_seed * MEMBER_SEED_STRIDE);
    let shards = ensemble::distribute_data(&train, &spec)?;
    let members = trainer.train(&train, &val, &spec, &cfg.train)?;
    Ok(TrainedSet {
        split_seed,
        stats,
        members,
        shards,
        train,
        test,
    })
}

fn vote_accuracy(members: &[TrainedMember], samples: &[Sample]) -> Result<f64, EnsembleError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for (x, y) in samples {
        let r = ensemble::predict_ensemble(members.iter().map(|m| &m.model), x)?;
        if usize::from(r.class) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

impl TrainedSet {
    pub fn accuracy(&self) -> Result<AccuracyPoint, EnsembleError> {
        let n = self.members.len() as f64;
        Ok(AccuracyPoint {
            split_seed: self.split_seed,
            n_members: self.members.len(),
            member_train_mean: self
                .members
                .iter()
                .zip(&self.shards)
                .map(|(m, s)| m.model.accuracy(s))
                .sum::<f64>()
                / n,
            member_test_mean: self.members.iter().map(|m| m.model.accuracy(&self.test)).sum::<f64>() / n,
            ensemble_train: vote_accuracy(&self.members, &self.train)?,
            ensemble_test: vote_accuracy(&self.members, &self.test)?,
        })
    }

    /// Worker `i` runs member `i`; broker and cloud run member 0.
    pub fn node_models(&self) -> NodeModels {
        let engine = |id: String, m: &TrainedMember| InferenceEngine::new(id, m.model.clone(), self.stats.clone());
        NodeModels {
            broker: engine(BROKER_ID.into(), &self.members[0]),
            cloud: engine(CLOUD_ID.into(), &self.members[0]),
            workers: self
                .members
                .iter()
                .enumerate()
                .map(|(i, m)| engine(sim::worker_id(i), m))
                .collect(),
        }
    }
}

/// Accuracy of every (seed, member count) combination, seeds outermost.
pub fn accuracy_study(
    records: &[PatientRecord],
    seeds: &[u64],
    member_counts: &[usize],
    cfg: &StudyConfig,
    trainer: &dyn Trainer,
) -> Result<Vec<AccuracyPoint>, SweepError> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &n in member_counts {
            out.push(train_set(records, seed, n, cfg, trainer)?.accuracy()?);
        }
    }
    Ok(out)
}

/// Per member count, the mean of each field over the seeds in `points`.
pub fn mean_by_members(points: &[AccuracyPoint]) -> Vec<AccuracyPoint> {
    let mut counts: Vec<usize> = points.iter().map(|p| p.n_members).collect();
    counts.sort_unstable();
    counts.dedup();
    counts
        .into_iter()
        .map(|n| {
            let group: Vec<&AccuracyPoint> = points.iter().filter(|p| p.n_members == n).collect();
            let k = group.len() as f64;
            let avg = |f: fn(&AccuracyPoint) -> f64| group.iter().map(|p| f(p)).sum::<f64>() / k;
            AccuracyPoint {
                split_seed: 0,
                n_members: n,
                member_train_mean: avg(|p| p.member_train_mean),
                member_test_mean: avg(|p| p.member_test_mean),
                ensemble_train: avg(|p| p.ensemble_train),
                ensemble_test: avg(|p| p.ensemble_test),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_workers: usize,
    pub ensemble: bool,
    /// Ensemble vote accuracy when `ensemble`, otherwise the member mean.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub member_test_mean: f64,
    pub timings: TimingSummary,
    pub bandwidth_bytes: u64,
    pub energy_j: f64,
}

/// One row per (n_workers, ensemble) with n_workers in `1..=max_workers`.
/// For each count a single ensemble of that many members is trained on
/// `split_seed`, then the simulation runs with worker `i` serving member `i`.
pub fn sweep_nodes(
    base: &SimConfig,
    records: &[PatientRecord],
    max_workers: usize,
    split_seed: u64,
    cfg: &StudyConfig,
    trainer: &dyn Trainer,
    energy: &EnergyModel,
) -> Result<Vec<SweepRow>, SweepError> {
    let mut rows = Vec::new();
    for n in 1..=max_workers {
        let set = train_set(records, split_seed, n, cfg, trainer)?;
        let acc = set.accuracy()?;
        let models = set.node_models();
        for ensemble in [false, true] {
            let sim_cfg = SimConfig {
                n_workers: n,
                ensemble,
                ..base.clone()
            };
            let out = sim::run_scenario_with(&sim_cfg, &models, energy)?;
            let (train_accuracy, test_accuracy) = if ensemble {
                (acc.ensemble_train, acc.ensemble_test)
            } else {
                (acc.member_train_mean, acc.member_test_mean)
            };
            rows.push(SweepRow {
                n_workers: n,
                ensemble,
                train_accuracy,
                test_accuracy,
                member_test_mean: acc.member_test_mean,
                timings: out.report.overall.clone(),
                bandwidth_bytes: out.report.bandwidth.total_bytes,
                energy_j: out.report.energy_joules.values().sum(),
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "n_workers,ensemble,train_accuracy,test_accuracy,arbitration_ms,latency_ms,jitter_ms,execution_ms,response_ms,bandwidth_bytes,energy_j";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.timings;
        out += &format!(
            "{},{},{:.4},{:.4},{:.3},{:.3},{:.3},{:.3},{:.3},{},{:.3}\n",
            r.n_workers,
            r.ensemble,
            r.train_accuracy,
            r.test_accuracy,
            t.arbitration_ms,
            t.latency_ms,
            t.jitter_ms,
            t.execution_ms,
            t.response_ms,
            r.bandwidth_bytes,
            r.energy_j
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heartdata::{parse_csv, CLEVELAND_CSV};

    fn quick() -> StudyConfig {
        StudyConfig {
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            distribution: Distribution::Equal,
        }
    }

    #[test]
    fn study_covers_every_combination() {
        let records = parse_csv(CLEVELAND_CSV).unwrap();
        let points = accuracy_study(&records, &[1, 2], &[1, 3], &quick(), &SerialTrainer).unwrap();
        assert_eq!(points.len(), 4);
        assert_eq!(points[1].split_seed, 1);
        assert_eq!(points[1].n_members, 3);
        for p in &points {
            for v in [p.member_train_mean, p.member_test_mean, p.ensemble_train, p.ensemble_test] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let means = mean_by_members(&points);
        assert_eq!(means.len(), 2);
        let expect = (points[0].ensemble_test + points[2].ensemble_test) / 2.0;
        assert!((means[0].ensemble_test - expect).abs() < 1e-12);
    }

    #[test]
    fn sweep_rows_and_trends() {
        let records = parse_csv(CLEVELAND_CSV).unwrap();
        let base = SimConfig {
            n_jobs: 30,
            load_check_ms: 10.0,
            ..SimConfig::default()
        };
        let rows = sweep_nodes(&base, &records, 3, 1, &quick(), &SerialTrainer, &EnergyModel::default()).unwrap();
        assert_eq!(rows.len(), 6);
        let arb: Vec<f64> = rows.iter().filter(|r| !r.ensemble).map(|r| r.timings.arbitration_ms).collect();
        assert!(arb.windows(2).all(|w| w[1] >= w[0]), "{arb:?}");
        for n in 2..=3 {
            let off = rows.iter().find(|r| r.n_workers == n && !r.ensemble).unwrap();
            let on = rows.iter().find(|r| r.n_workers == n && r.ensemble).unwrap();
            assert!(on.bandwidth_bytes > off.bandwidth_bytes);
        }
        let csv = sweep_to_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("n_workers,ensemble,"));
    }
}
