//! File formats: datasets, model and normalization files, ensemble
//! manifests, scenario configs and trace dumps.

use std::path::{Path, PathBuf};

use healthfog_core::config::KvConfig;
use healthfog_core::ensemble::EnsembleManifest;
use healthfog_core::heartdata::{parse_csv, NormStats, PatientRecord};
use healthfog_core::metrics::JobTrace;
use healthfog_core::neuralnet::{model_from_text, model_to_text, MlpModel};
use healthfog_core::sim::SimConfig;
use healthfog_core::worker::InferenceEngine;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "norm_stats.txt";

pub fn member_file(index: usize) -> String {
    format!("member-{}.model", index + 1)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<PatientRecord>> {
    parse_csv(&read_text(path)?).map_err(|e| Error::format(path, e))
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    model_from_text(&read_text(path)?).map_err(|e| Error::format(path, e))
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    write_text(path, &model_to_text(model))
}

pub fn load_stats(path: &Path) -> Result<NormStats> {
    NormStats::from_text(&read_text(path)?).map_err(|e| Error::format(path, e))
}

pub fn save_stats(path: &Path, stats: &NormStats) -> Result<()> {
    write_text(path, &stats.to_text())
}

pub fn load_engine(node_id: &str, model: &Path, stats: &Path) -> Result<InferenceEngine> {
    Ok(InferenceEngine::new(node_id, load_model(model)?, load_stats(stats)?))
}

pub fn save_manifest(path: &Path, manifest: &EnsembleManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Internal(e.to_string()))?;
    write_text(path, &format!("{text}\n"))
}

pub fn load_manifest(path: &Path) -> Result<EnsembleManifest> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e))
}

/// Member models and statistics named by a manifest, resolved relative to it.
pub fn load_ensemble(manifest_path: &Path) -> Result<(EnsembleManifest, Vec<MlpModel>, NormStats)> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let models = manifest
        .members
        .iter()
        .map(|m| load_model(&dir.join(&m.model)))
        .collect::<Result<Vec<_>>>()?;
    let stats = load_stats(&dir.join(&manifest.norm_stats))?;
    Ok((manifest, models, stats))
}

pub fn load_kv(path: &Path) -> Result<KvConfig> {
    KvConfig::parse(&read_text(path)?).map_err(|e| Error::format(path, e))
}

pub fn load_sim_config(path: &Path) -> Result<SimConfig> {
    SimConfig::from_kv(&load_kv(path)?).map_err(|e| Error::format(path, e))
}

pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    write_text(path, &format!("{text}\n"))
}

pub fn load_traces(path: &Path) -> Result<Vec<JobTrace>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e))
}

/// Resolves `value` relative to the directory of the config file it came from.
pub fn relative_to(config: &Path, value: &str) -> PathBuf {
    let p = Path::new(value);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::EXIT_USAGE;
    use healthfog_core::neuralnet::init_model;

    #[test]
    fn missing_file_names_path() {
        let err = load_dataset(Path::new("/nonexistent/heart.csv")).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("/nonexistent/heart.csv"));
    }

    #[test]
    fn model_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let m = init_model(7);
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_model_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        write_text(&path, "healthfog-mlp v1\ndims 13 20 20 10 2\n").unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn relative_paths_follow_config() {
        assert_eq!(relative_to(Path::new("/etc/hf/worker.conf"), "m.model"), PathBuf::from("/etc/hf/m.model"));
        assert_eq!(relative_to(Path::new("/etc/hf/worker.conf"), "/m.model"), PathBuf::from("/m.model"));
    }
}
