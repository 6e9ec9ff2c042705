//! `healthfog` subcommands.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use healthfog_core::config::KvConfig;
use healthfog_core::ensemble::Distribution;
use healthfog_core::heartdata::parse_csv;
use healthfog_core::metrics::{EnergyModel, MetricsReport, NodeClass};
use healthfog_core::neuralnet::TrainConfig;
use healthfog_core::protocol::{self, Scenario};
use healthfog_core::sim;
use healthfog_core::sweep::{self, StudyConfig};

use crate::client::{self, Gateway};
use crate::error::{Error, Result, EXIT_OK, EXIT_USAGE};
use crate::io;
use crate::node::broker::{start_broker, BrokerNodeConfig};
use crate::node::worker::{engine_from_kv, start_worker, WorkerConfig};
use crate::train::{self, ParallelTrainer, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "healthfog", version, about = "Fog-computing heart-disease diagnosis: train, serve, submit, benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Role {
    Broker,
    Worker,
    Cloud,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistributionArg {
    Equal,
    Bootstrap,
}

impl From<DistributionArg> for Distribution {
    fn from(d: DistributionArg) -> Self {
        match d {
            DistributionArg::Equal => Distribution::Equal,
            DistributionArg::Bootstrap => Distribution::Bootstrap,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an ensemble and write model files, a manifest and an accuracy report.
    Train {
        dataset: PathBuf,
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        members: usize,
        #[arg(long, value_enum, default_value = "equal")]
        distribution: DistributionArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 50.0)]
        gate_threshold: f64,
    },
    /// Run a broker, worker or cloud node until interrupted.
    Serve {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `listen` address.
        #[arg(long)]
        listen: Option<String>,
        /// Overrides any config key, as `key=value`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Send one patient record (or every record of a CSV file) through the broker.
    Submit {
        #[arg(long)]
        broker: String,
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        payload: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        ensemble: bool,
        #[arg(long)]
        latency_tolerant: bool,
        /// Have the broker deliver the data and return the result itself.
        #[arg(long)]
        relay: bool,
        #[arg(long, default_value = "job")]
        job_id: String,
        /// Print the raw JSON responses instead of a summary.
        #[arg(long)]
        json: bool,
        /// Write gateway-side traces for `report`.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Run a simulated scenario; with --sweep, the node-count sweep.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 5)]
        max_workers: usize,
        /// Dataset for the sweep's models; the bundled Cleveland data by default.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        split_seed: u64,
    },
    /// Summarize a trace file written by `bench` or `submit`.
    Report {
        #[arg(long)]
        traces: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Internal(format!("tokio runtime: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            dataset,
            out_dir,
            members,
            distribution,
            seed,
            epochs,
            learning_rate,
            batch_size,
            gate_threshold,
        } => {
            let records = io::load_dataset(&dataset)?;
            let opts = TrainOptions {
                members,
                distribution: distribution.into(),
                seed,
                train: TrainConfig {
                    epochs,
                    learning_rate,
                    batch_size,
                    ..TrainConfig::default()
                },
                gate_threshold,
            };
            let trained = train::train_ensemble(&records, &opts)?;
            train::write_model_dir(&out_dir, &trained)?;
            print!("{}", trained.report.to_table());
            println!("wrote {}", out_dir.join(io::MANIFEST_FILE).display());
            Ok(())
        }
        Command::Serve {
            role,
            config,
            listen,
            overrides,
        } => {
            let mut kv = io::load_kv(&config)?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Invalid(format!("--set {o:?} is not key=value")))?;
                kv.set(k.trim(), v.trim());
            }
            if let Some(l) = listen {
                kv.set("listen", l);
            }
            serve(role, &config, &kv)
        }
        Command::Submit {
            broker,
            payload,
            file,
            ensemble,
            latency_tolerant,
            relay,
            job_id,
            json,
            traces,
            timeout_ms,
        } => {
            let payloads: Vec<String> = match (payload, file) {
                (Some(p), _) => vec![p],
                (None, Some(f)) => {
                    let records = parse_csv(&io::read_text(&f)?).map_err(|e| Error::format(&f, e))?;
                    records.iter().map(protocol::payload_for).collect()
                }
                (None, None) => return Err(Error::Invalid("give --payload or --file".into())),
            };
            let mut requests = Vec::new();
            for (i, p) in payloads.iter().enumerate() {
                let id = if payloads.len() == 1 { job_id.clone() } else { format!("{job_id}-{}", i + 1) };
                let mut r = Gateway::request(id, p, ensemble, latency_tolerant)?;
                r.relay = relay;
                requests.push(r);
            }
            let gateway = Gateway::new(broker).with_timeout(Duration::from_millis(timeout_ms));
            let rt = runtime()?;
            let mut all = Vec::new();
            for r in &requests {
                let s = rt.block_on(gateway.submit(r))?;
                if json {
                    println!("{}", protocol::encode(&s.response));
                } else {
                    println!("{}", client::describe(&s.response));
                }
                all.push(s.trace);
            }
            if let Some(path) = traces {
                io::save_json(&path, &all)?;
            }
            Ok(())
        }
        Command::Bench {
            scenario,
            out,
            sweep,
            max_workers,
            dataset,
            epochs,
            split_seed,
        } => {
            let cfg = io::load_sim_config(&scenario)?;
            for w in cfg.validate().map_err(|e| Error::format(&scenario, e))? {
                eprintln!("warning: {w}");
            }
            if sweep {
                let records = match dataset {
                    Some(p) => io::load_dataset(&p)?,
                    None => parse_csv(healthfog_core::heartdata::CLEVELAND_CSV).map_err(|e| Error::Internal(e.to_string()))?,
                };
                let study = StudyConfig {
                    train: TrainConfig {
                        epochs,
                        ..TrainConfig::default()
                    },
                    distribution: Distribution::Equal,
                };
                let rows = sweep::sweep_nodes(&cfg, &records, max_workers, split_seed, &study, &ParallelTrainer, &EnergyModel::default())
                    .map_err(|e| Error::Invalid(e.to_string()))?;
                let csv = sweep::sweep_to_csv(&rows);
                io::write_text(&out.join("sweep.csv"), &csv)?;
                io::save_json(&out.join("sweep.json"), &rows)?;
                print!("{csv}");
            } else {
                let outcome = sim::run_scenario(&cfg).map_err(|e| Error::Invalid(e.to_string()))?;
                io::write_text(&out.join("traces.json"), &sim::traces_to_json(&outcome.traces))?;
                io::save_json(&out.join("report.json"), &outcome.report)?;
                io::save_json(&out.join("frames.json"), &outcome.frames)?;
                print!("{}", outcome.report.to_table());
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Report { traces, json } => {
            let list = io::load_traces(&traces)?;
            let report = report_from_traces(&list).map_err(|e| Error::format(&traces, e))?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                io::save_json(&p, &report)?;
            }
            Ok(())
        }
    }
}

/// Report over loaded traces; the energy horizon spans first submission to
/// last completion.
pub fn report_from_traces(traces: &[healthfog_core::metrics::JobTrace]) -> Result<MetricsReport, String> {
    let start = traces.iter().map(|t| t.submitted_at_ms).fold(f64::INFINITY, f64::min);
    let end = traces
        .iter()
        .map(|t| t.submitted_at_ms + t.response_ms.unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let horizon = if traces.is_empty() { 0.0 } else { end - start };
    let mut nodes: Vec<(String, NodeClass)> = Vec::new();
    for t in traces {
        for u in &t.nodes {
            if u.class != NodeClass::Gateway && !nodes.iter().any(|(id, _)| id == &u.node_id) {
                nodes.push((u.node_id.clone(), u.class));
            }
        }
    }
    MetricsReport::build(traces, None, &EnergyModel::default(), horizon, &nodes).map_err(|e| e.to_string())
}

fn serve(role: Role, config: &Path, kv: &KvConfig) -> Result<()> {
    let rt = runtime()?;
    rt.block_on(async {
        let node = match role {
            Role::Broker => {
                let cfg = BrokerNodeConfig::from_kv(kv)?;
                let engine = engine_from_kv(kv, config, &cfg.broker.node_id)?;
                start_broker(cfg, engine).await?
            }
            Role::Worker | Role::Cloud => {
                let scenario = if matches!(role, Role::Cloud) { Scenario::Cloud } else { Scenario::Worker };
                let cfg = WorkerConfig::from_kv(kv, scenario)?;
                let engine = engine_from_kv(kv, config, &cfg.node_id)?;
                start_worker(cfg, engine).await?
            }
        };
        eprintln!("{role:?} listening on {}", node.url);
        let _ = tokio::signal::ctrl_c().await;
        node.stop().await;
        Ok(())
    })
}
