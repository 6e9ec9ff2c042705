#![allow(dead_code)]

use std::time::Duration;

use healthfog::node::broker::{start_broker, BrokerNodeConfig};
use healthfog::node::worker::{start_worker, WorkerConfig};
use healthfog::node::RunningNode;
use healthfog_core::heartdata::{fit_norm, parse_csv, PatientRecord, CLEVELAND_CSV};
use healthfog_core::neuralnet::init_model;
use healthfog_core::protocol::{NodeInfo, Scenario};
use healthfog_core::worker::InferenceEngine;

pub const ROW1: &str = "63,1,3,145,233,1,0,150,0,2.3,0,0,1";

pub fn records() -> Vec<PatientRecord> {
    parse_csv(CLEVELAND_CSV).unwrap()
}

pub fn engine(node_id: &str, seed: u64) -> InferenceEngine {
    let stats = fit_norm(&records()).unwrap();
    InferenceEngine::new(node_id, init_model(seed), stats)
}

pub struct Stack {
    pub broker: RunningNode,
    pub workers: Vec<RunningNode>,
    pub cloud: Option<RunningNode>,
    pub http: reqwest::Client,
}

impl Stack {
    /// Broker, `n` workers heartbeating every 100 ms, and optionally a cloud node.
    pub async fn start(n: usize, with_cloud: bool) -> Stack {
        let cloud = if with_cloud {
            let cfg = WorkerConfig {
                node_id: "cloud".into(),
                listen: "127.0.0.1:0".into(),
                scenario: Scenario::Cloud,
                ..WorkerConfig::default()
            };
            Some(start_worker(cfg, engine("cloud", 100)).await.unwrap())
        } else {
            None
        };
        let mut bcfg = BrokerNodeConfig {
            listen: "127.0.0.1:0".into(),
            cloud_timeout: Duration::from_millis(500),
            ensemble_timeout: Duration::from_millis(1500),
            ..BrokerNodeConfig::default()
        };
        bcfg.broker.cloud_endpoint = cloud.as_ref().map(|c| c.url.clone());
        let broker = start_broker(bcfg, engine("broker", 1)).await.unwrap();
        let mut workers = Vec::new();
        for i in 0..n {
            let id = format!("worker-{}", i + 1);
            let cfg = WorkerConfig {
                node_id: id.clone(),
                listen: "127.0.0.1:0".into(),
                broker: Some(broker.url.clone()),
                heartbeat_interval: Duration::from_millis(100),
                ensemble_timeout: Duration::from_millis(1500),
                ..WorkerConfig::default()
            };
            workers.push(start_worker(cfg, engine(&id, 10 + i as u64)).await.unwrap());
        }
        let stack = Stack {
            broker,
            workers,
            cloud,
            http: reqwest::Client::new(),
        };
        stack.wait_live(n).await;
        stack
    }

    pub async fn nodes(&self) -> Vec<NodeInfo> {
        let body = self
            .http
            .get(format!("{}/api/nodes", self.broker.url))
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap();
        serde_json::from_str(&body).unwrap()
    }

    pub async fn wait_live(&self, n: usize) {
        for _ in 0..100 {
            if self.nodes().await.iter().filter(|i| i.live).count() >= n {
                return;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        panic!("{n} workers never became live");
    }

    pub async fn post(&self, path: &str, body: String) -> (u16, String) {
        let r = self
            .http
            .post(format!("{}{path}", self.broker.url))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.text().await.unwrap())
    }

    pub async fn stop(self) {
        for w in self.workers {
            w.stop().await;
        }
        if let Some(c) = self.cloud {
            c.stop().await;
        }
        self.broker.stop().await;
    }
}
