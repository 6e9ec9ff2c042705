//! Ensemble training on top of the core crate: parallel member training,
//! model directories and the accuracy / confidence report.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use healthfog_core::ensemble::{
    self, Distribution, EnsembleError, EnsembleManifest, EnsembleSpec, Gate, ManifestMember, TrainedMember,
};
use healthfog_core::heartdata::{fit_norm, split_dataset, to_samples, NormStats, PatientRecord};
use healthfog_core::neuralnet::{Sample, TrainConfig};
use healthfog_core::sweep::Trainer;

use crate::error::{Error, Result};
use crate::io;

/// Trains members on the rayon pool. Each member is seeded independently, so
/// the result equals serial training.
pub struct ParallelTrainer;

impl Trainer for ParallelTrainer {
    fn train(
        &self,
        train: &[Sample],
        val: &[Sample],
        spec: &EnsembleSpec,
        cfg: &TrainConfig,
    ) -> Result<Vec<TrainedMember>, EnsembleError> {
        let shards = ensemble::distribute_data(train, spec)?;
        shards
            .par_iter()
            .zip(spec.member_seeds.par_iter())
            .enumerate()
            .map(|(index, (shard, &seed))| {
                ensemble::train_member(shard, val, seed, cfg).map_err(|source| EnsembleError::Member { index, source })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub members: usize,
    pub distribution: Distribution,
    /// Seeds the split; member `i` is seeded with `seed + i`.
    pub seed: u64,
    pub train: TrainConfig,
    pub gate_threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            members: 1,
            distribution: Distribution::Equal,
            seed: 42,
            train: TrainConfig::default(),
            gate_threshold: ensemble::DEFAULT_GATE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub file: String,
    pub seed: u64,
    pub shard_size: usize,
    pub final_train_loss: f64,
    /// Accuracy on the member's own shard.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

/// How confident the ensemble was when it was wrong on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub threshold: f64,
    pub test_samples: usize,
    pub incorrect: usize,
    /// `None` when every test prediction was correct.
    pub max_incorrect_confidence: Option<f64>,
    pub incorrect_gated: usize,
    pub correct_gated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: usize,
    pub split: [usize; 3],
    pub seed: u64,
    pub distribution: Distribution,
    pub epochs: usize,
    pub members: Vec<MemberReport>,
    pub ensemble: SplitAccuracy,
    pub confidence: ConfidenceReport,
}

pub struct TrainedEnsemble {
    pub members: Vec<TrainedMember>,
    pub stats: NormStats,
    pub report: TrainReport,
}

fn vote_accuracy(members: &[TrainedMember], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for (x, y) in samples {
        let r = ensemble::predict_ensemble(members.iter().map(|m| &m.model), x).map_err(invalid)?;
        correct += usize::from(usize::from(r.class) == *y);
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn invalid(e: impl std::fmt::Display) -> Error {
    Error::Invalid(e.to_string())
}

pub fn confidence_report(members: &[TrainedMember], test: &[Sample], threshold: f64) -> Result<ConfidenceReport> {
    let mut report = ConfidenceReport {
        threshold,
        test_samples: test.len(),
        incorrect: 0,
        max_incorrect_confidence: None,
        incorrect_gated: 0,
        correct_gated: 0,
    };
    for (x, y) in test {
        let r = ensemble::predict_ensemble(members.iter().map(|m| &m.model), x).map_err(invalid)?;
        let gated = r.gate(threshold) == Gate::ConsultDoctor;
        if usize::from(r.class) == *y {
            report.correct_gated += usize::from(gated);
        } else {
            report.incorrect += 1;
            report.incorrect_gated += usize::from(gated);
            report.max_incorrect_confidence = Some(report.max_incorrect_confidence.map_or(r.confidence, |m: f64| m.max(r.confidence)));
        }
    }
    Ok(report)
}

/// Split, normalize, train and evaluate; nothing is written.
pub fn train_ensemble(records: &[PatientRecord], opts: &TrainOptions) -> Result<TrainedEnsemble> {
    let split = split_dataset(records, opts.seed).map_err(invalid)?;
    let stats = fit_norm(&split.train).map_err(invalid)?;
    let train = to_samples(&split.train, &stats);
    let val = to_samples(&split.validation, &stats);
    let test = to_samples(&split.test, &stats);
    let spec = EnsembleSpec::new(opts.members, opts.distribution, opts.seed);
    opts.train.validate().map_err(invalid)?;
    let shards = ensemble::distribute_data(&train, &spec).map_err(invalid)?;
    let members = ParallelTrainer.train(&train, &val, &spec, &opts.train).map_err(invalid)?;
    let member_reports = members
        .iter()
        .zip(&shards)
        .enumerate()
        .map(|(i, (m, shard))| MemberReport {
            file: io::member_file(i),
            seed: m.seed,
            shard_size: m.shard_size,
            final_train_loss: m.history.train_loss.last().copied().unwrap_or(f64::NAN),
            train_accuracy: m.model.accuracy(shard),
            val_accuracy: m.model.accuracy(&val),
            test_accuracy: m.model.accuracy(&test),
        })
        .collect();
    let report = TrainReport {
        records: records.len(),
        split: [train.len(), val.len(), test.len()],
        seed: opts.seed,
        distribution: opts.distribution,
        epochs: opts.train.epochs,
        members: member_reports,
        ensemble: SplitAccuracy {
            train: vote_accuracy(&members, &train)?,
            val: vote_accuracy(&members, &val)?,
            test: vote_accuracy(&members, &test)?,
        },
        confidence: confidence_report(&members, &test, opts.gate_threshold)?,
    };
    Ok(TrainedEnsemble { members, stats, report })
}

/// Writes member models, normalization stats, the manifest and `report.json`.
pub fn write_model_dir(dir: &Path, trained: &TrainedEnsemble) -> Result<EnsembleManifest> {
    let mut members = Vec::new();
    for (i, m) in trained.members.iter().enumerate() {
        let file = io::member_file(i);
        io::save_model(&dir.join(&file), &m.model)?;
        members.push(ManifestMember {
            model: file,
            seed: m.seed,
            shard_size: m.shard_size,
        });
    }
    io::save_stats(&dir.join(io::STATS_FILE), &trained.stats)?;
    let manifest = EnsembleManifest {
        version: 1,
        distribution: trained.report.distribution,
        norm_stats: io::STATS_FILE.into(),
        members,
    };
    io::save_manifest(&dir.join(io::MANIFEST_FILE), &manifest)?;
    io::save_json(&dir.join("report.json"), &trained.report)?;
    Ok(manifest)
}

impl TrainReport {
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let [tr, va, te] = self.split;
        let _ = writeln!(
            out,
            "{} records, split {tr}/{va}/{te} (seed {}), {} member(s), {:?} distribution, {} epochs",
            self.records,
            self.seed,
            self.members.len(),
            self.distribution,
            self.epochs
        );
        let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}", "member", "seed", "shard", "loss", "train", "val", "test");
        for m in &self.members {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                m.file, m.seed, m.shard_size, m.final_train_loss, m.train_accuracy, m.val_accuracy, m.test_accuracy
            );
        }
        let e = &self.ensemble;
        let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>8} {:>8.4} {:>8.4} {:>8.4}", "ensemble", "", "", "", e.train, e.val, e.test);
        let c = &self.confidence;
        let max = c.max_incorrect_confidence.map_or("n/a".to_string(), |m| format!("{m:.1}%"));
        let _ = writeln!(
            out,
            "test: {} of {} incorrect, max confidence when incorrect {max}; gate at {}%: {} incorrect and {} correct sent to a doctor",
            c.incorrect, c.test_samples, c.threshold, c.incorrect_gated, c.correct_gated
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use healthfog_core::heartdata::{parse_csv, CLEVELAND_CSV};

    fn quick(members: usize) -> TrainOptions {
        TrainOptions {
            members,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            ..TrainOptions::default()
        }
    }

    #[test]
    fn parallel_equals_serial() {
        let records = parse_csv(CLEVELAND_CSV).unwrap();
        let split = split_dataset(&records, 3).unwrap();
        let stats = fit_norm(&split.train).unwrap();
        let train = to_samples(&split.train, &stats);
        let val = to_samples(&split.validation, &stats);
        let spec = EnsembleSpec::new(3, Distribution::Bootstrap, 11);
        let cfg = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        let serial = ensemble::train_ensemble(&train, &val, &spec, &cfg).unwrap();
        let parallel = ParallelTrainer.train(&train, &val, &spec, &cfg).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn model_dir_layout() {
        let records = parse_csv(CLEVELAND_CSV).unwrap();
        let trained = train_ensemble(&records, &quick(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_model_dir(dir.path(), &trained).unwrap();
        assert_eq!(manifest.members.len(), 5);
        let sizes: Vec<usize> = manifest.members.iter().map(|m| m.shard_size).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), trained.report.split[0]);
        let (_, models, stats) = io::load_ensemble(&dir.path().join(io::MANIFEST_FILE)).unwrap();
        assert_eq!(stats, trained.stats);
        for (m, t) in models.iter().zip(&trained.members) {
            assert_eq!(m, &t.model);
        }
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn confidence_report_counts() {
        let records = parse_csv(CLEVELAND_CSV).unwrap();
        let trained = train_ensemble(&records, &quick(1)).unwrap();
        let c = &trained.report.confidence;
        assert_eq!(c.test_samples, trained.report.split[2]);
        assert!(c.incorrect_gated <= c.incorrect);
        if let Some(m) = c.max_incorrect_confidence {
            assert!((0.0..=100.0).contains(&m));
            assert_eq!(c.incorrect_gated == c.incorrect, m < c.threshold);
        }
    }
}
