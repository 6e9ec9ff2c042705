//! `key = value` configuration text shared by nodes and simulated scenarios.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use crate::broker::BrokerConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("unknown keys: {0:?}")]
    UnknownKeys(Vec<String>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    /// Overwrites `slot` when the key is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails if any key is not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        let unknown: Vec<String> = self
            .keys()
            .filter(|k| !known.contains(k))
            .map(ToString::to_string)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(unknown))
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub const BROKER_KEYS: &[&str] = &[
    "node_id",
    "address",
    "overload_threshold",
    "heartbeat_interval_ms",
    "stale_timeout_ms",
    "big_job_bytes",
    "cloud_endpoint",
    "load_check_ms",
    "arbitration_base_ms",
    "broker_capacity",
    "gate_threshold",
];

impl BrokerConfig {
    /// Applies the broker keys present in `kv`. When `heartbeat_interval_ms`
    /// is given without `stale_timeout_ms`, the timeout becomes three intervals.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<(), ConfigError> {
        kv.read_into("node_id", &mut self.node_id)?;
        kv.read_into("address", &mut self.address)?;
        kv.read_into("overload_threshold", &mut self.overload_threshold)?;
        kv.read_into("heartbeat_interval_ms", &mut self.heartbeat_interval_ms)?;
        if kv.get_str("stale_timeout_ms").is_none() && kv.get_str("heartbeat_interval_ms").is_some() {
            self.stale_timeout_ms = 3 * self.heartbeat_interval_ms;
        }
        kv.read_into("stale_timeout_ms", &mut self.stale_timeout_ms)?;
        kv.read_into("big_job_bytes", &mut self.big_job_bytes)?;
        if let Some(v) = kv.get_str("cloud_endpoint") {
            self.cloud_endpoint = (!v.is_empty() && v != "none").then(|| v.to_string());
        }
        kv.read_into("load_check_ms", &mut self.load_check_ms)?;
        kv.read_into("arbitration_base_ms", &mut self.arbitration_base_ms)?;
        kv.read_into("broker_capacity", &mut self.broker_capacity)?;
        kv.read_into("gate_threshold", &mut self.gate_threshold)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let kv = KvConfig::parse("# broker\noverload_threshold = 0.8\n\ncloud_endpoint=http://c:9\n").unwrap();
        let mut cfg = BrokerConfig::default();
        cfg.apply_kv(&kv).unwrap();
        assert_eq!(cfg.overload_threshold, 0.8);
        assert_eq!(cfg.cloud_endpoint.as_deref(), Some("http://c:9"));
        assert_eq!(cfg.stale_timeout_ms, 3000);
    }

    #[test]
    fn stale_timeout_follows_interval() {
        let kv = KvConfig::parse("heartbeat_interval_ms = 500").unwrap();
        let mut cfg = BrokerConfig::default();
        cfg.apply_kv(&kv).unwrap();
        assert_eq!(cfg.stale_timeout_ms, 1500);
    }

    #[test]
    fn errors() {
        assert_eq!(KvConfig::parse("novalue"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(KvConfig::parse("a=1\na=2"), Err(ConfigError::Duplicate { line: 2, .. })));
        let kv = KvConfig::parse("big_job_bytes = lots").unwrap();
        assert!(matches!(BrokerConfig::default().apply_kv(&kv), Err(ConfigError::BadValue { .. })));
        let kv = KvConfig::parse("colour = red").unwrap();
        assert_eq!(kv.check_known(BROKER_KEYS), Err(ConfigError::UnknownKeys(alloc::vec!["colour".into()])));
    }
}
