//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p healthfog --test acceptance`.

#[path = "../../core/tests/golden/mod.rs"]
mod golden;

use std::time::{Duration, Instant};

use healthfog::train::{self, ParallelTrainer, TrainOptions};
use healthfog_core::ensemble::{self, Gate};
use healthfog_core::heartdata::{fit_norm, parse_csv, split_dataset, to_samples, PatientRecord, CLEVELAND_CSV};
use healthfog_core::metrics::TimingSummary;
use healthfog_core::neuralnet::{gradient_check, init_model, TrainConfig};
use healthfog_core::protocol::Scenario;
use healthfog_core::sim::{self, SimConfig, DEFAULT_PAYLOAD};
use healthfog_core::sweep::{accuracy_study, mean_by_members, AccuracyPoint, StudyConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const STUDY_EPOCHS: usize = 1000;
const ACCURACY_BUDGET: Duration = Duration::from_secs(120);
const GRADIENT_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_TOL: f64 = 1e-4;
const CONFIDENCE_TOL: f64 = 1e-9;

// Seed 42, one member, 300 epochs, equal partition.
const GOLDEN_TEST_ACCURACY: f64 = 0.7705;
const GOLDEN_ACCURACY_TOL: f64 = 0.02;
const GOLDEN_ROW1_CLASS: u8 = 1;
const GOLDEN_ROW1_CONFIDENCE: f64 = 66.051167;
const GOLDEN_CONFIDENCE_TOL: f64 = 1e-6;

#[derive(Default)]
struct Suite {
    failed: Vec<String>,
    total: usize,
}

impl Suite {
    fn check(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) {
        self.total += 1;
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

fn records() -> Vec<PatientRecord> {
    parse_csv(CLEVELAND_CSV).expect("bundled dataset parses")
}

fn study(epochs: usize) -> StudyConfig {
    StudyConfig {
        train: TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
        ..StudyConfig::default()
    }
}

fn accuracy(suite: &mut Suite, records: &[PatientRecord]) {
    let cfg = study(STUDY_EPOCHS);
    let start = Instant::now();
    let five = accuracy_study(records, &SEEDS, &[5], &cfg, &ParallelTrainer).expect("N=5 study");
    let took = start.elapsed();
    let wins = five.iter().filter(|p| p.ensemble_test >= p.member_test_mean).count();
    let per_seed: Vec<String> = five
        .iter()
        .map(|p| format!("seed {} {:.3} vs {:.3}", p.split_seed, p.ensemble_test, p.member_test_mean))
        .collect();
    suite.check(
        "ensemble accuracy gain",
        wins >= 4 && took < ACCURACY_BUDGET,
        format!(
            "ensemble >= member mean on test in {wins}/5 seeds ({}); {:.1} s of {} s",
            per_seed.join(", "),
            took.as_secs_f64(),
            ACCURACY_BUDGET.as_secs()
        ),
    );

    let one = accuracy_study(records, &SEEDS, &[1], &cfg, &ParallelTrainer).expect("N=1 study");
    let all: Vec<AccuracyPoint> = one.into_iter().chain(five).collect();
    let means = mean_by_members(&all);
    let (n1, n5) = (&means[0], &means[1]);
    let train_ok = n5.member_train_mean >= n1.member_train_mean - 0.01;
    let test_ok = n5.member_test_mean <= n1.member_test_mean + 0.02;
    suite.check(
        "member accuracy trends",
        train_ok && test_ok,
        format!(
            "train N=5 {:.4} vs N=1 {:.4} (need >= N=1 - 0.01); test N=5 {:.4} vs N=1 {:.4} (need <= N=1 + 0.02)",
            n5.member_train_mean, n1.member_train_mean, n5.member_test_mean, n1.member_test_mean
        ),
    );
}

fn confidence_gate(suite: &mut Suite, records: &[PatientRecord]) {
    let cases = [((0.5, 0.5), 0.0), ((0.9, 0.1), 80.0), ((0.7485, 0.2515), 49.7)];
    let mut worst: f64 = 0.0;
    for ((p0, p1), want) in cases {
        let got = ensemble::confidence(p0, p1).expect("valid probabilities");
        worst = worst.max((got - want).abs());
    }
    let boundary = ensemble::gate(50.0, 50.0) == Gate::Reliable
        && ensemble::gate(49.7, 50.0) == Gate::ConsultDoctor
        && ensemble::gate(80.0, 50.0) == Gate::Reliable;

    let opts = TrainOptions {
        members: 1,
        seed: 42,
        ..TrainOptions::default()
    };
    let trained = train::train_ensemble(records, &opts).expect("seed 42 model trains");
    let report = &trained.report.confidence;
    let split = split_dataset(records, 42).expect("split");
    let stats = fit_norm(&split.train).expect("stats");
    let test = to_samples(&split.test, &stats);
    let mut gate_ok = true;
    for (x, _) in &test {
        let r = ensemble::predict_ensemble(trained.members.iter().map(|m| &m.model), x).expect("prediction");
        let want = if r.confidence < 50.0 { Gate::ConsultDoctor } else { Gate::Reliable };
        gate_ok &= r.gate(50.0) == want;
    }
    let listed = report.max_incorrect_confidence.is_some() || report.incorrect == 0;
    suite.check(
        "confidence gate",
        worst <= CONFIDENCE_TOL && boundary && gate_ok && listed && report.threshold == 50.0,
        format!(
            "formula max error {worst:.1e}; seed 42 test set: {} of {} incorrect, max confidence when incorrect {}, \
             gated at 50: {} incorrect and {} correct",
            report.incorrect,
            report.test_samples,
            report
                .max_incorrect_confidence
                .map_or("n/a".to_string(), |c| format!("{c:.2}%")),
            report.incorrect_gated,
            report.correct_gated
        ),
    );

    let engine = healthfog_core::worker::InferenceEngine::new("golden", trained.members[0].model.clone(), trained.stats.clone());
    let r = engine.execute_local(DEFAULT_PAYLOAD).expect("row 1 predicts");
    let acc = trained.report.ensemble.test;
    suite.check(
        "golden seed 42",
        (acc - GOLDEN_TEST_ACCURACY).abs() <= GOLDEN_ACCURACY_TOL
            && r.class == GOLDEN_ROW1_CLASS
            && (r.confidence - GOLDEN_ROW1_CONFIDENCE).abs() <= GOLDEN_CONFIDENCE_TOL,
        format!(
            "test accuracy {acc:.4} (pinned {GOLDEN_TEST_ACCURACY} +/- {GOLDEN_ACCURACY_TOL}); row 1 class {} confidence {:.6} \
             (pinned {GOLDEN_ROW1_CLASS}, {GOLDEN_ROW1_CONFIDENCE:.6})",
            r.class, r.confidence
        ),
    );
}

fn gradients(suite: &mut Suite, records: &[PatientRecord]) {
    let start = Instant::now();
    let split = split_dataset(records, 7).expect("split");
    let stats = fit_norm(&split.train).expect("stats");
    let samples = to_samples(&split.train, &stats);
    let mut worst: f64 = 0.0;
    for b in 0..10u64 {
        let model = init_model(100 + b);
        let from = (b as usize * 16) % (samples.len() - 16);
        let batch = &samples[from..from + 16];
        worst = worst.max(gradient_check(&model, batch, usize::MAX, b));
    }
    let took = start.elapsed();
    suite.check(
        "gradient check",
        worst < GRADIENT_TOL && took < GRADIENT_BUDGET,
        format!(
            "max relative error {worst:.2e} over 10 batches, all parameters (need < {GRADIENT_TOL:.0e}); {:.2} s",
            took.as_secs_f64()
        ),
    );
}

fn run(cfg: &SimConfig) -> sim::SimOutcome {
    sim::run_scenario(cfg).expect("scenario runs")
}

fn scenario_summary(out: &sim::SimOutcome, s: Scenario) -> TimingSummary {
    out.report.by_scenario.get(s.as_str()).cloned().unwrap_or_default()
}

fn arbitration(suite: &mut Suite) {
    let base = SimConfig {
        load_check_ms: 50.0,
        ..SimConfig::default()
    };
    let means: Vec<f64> = (1..=5)
        .map(|n| {
            run(&SimConfig {
                n_workers: n,
                ..base.clone()
            })
            .report
            .overall
            .arbitration_ms
        })
        .collect();
    let increasing = means.windows(2).all(|w| w[1] > w[0]);
    let overhead = base.arbitration_base_ms;
    let broker_only = scenario_summary(
        &run(&SimConfig {
            n_workers: 0,
            ..base.clone()
        }),
        Scenario::BrokerOnly,
    );
    let cloud = scenario_summary(
        &run(&SimConfig {
            latency_tolerant: true,
            ..base.clone()
        }),
        Scenario::Cloud,
    );
    let near = |x: f64| (x - overhead).abs() <= 0.1 * overhead;
    suite.check(
        "arbitration trend",
        increasing && broker_only.jobs > 0 && cloud.jobs > 0 && near(broker_only.arbitration_ms) && near(cloud.arbitration_ms),
        format!(
            "mean arbitration ms for 1..5 workers {:?}; BrokerOnly {:.2}, Cloud {:.2} vs base {overhead:.2} (+/- 10%)",
            means.iter().map(|m| (m * 100.0).round() / 100.0).collect::<Vec<_>>(),
            broker_only.arbitration_ms,
            cloud.arbitration_ms
        ),
    );
}

fn cloud_vs_worker(suite: &mut Suite) {
    let base = SimConfig {
        cloud_delay_ms: 100.0,
        lan_delay_ms: 2.0,
        n_jobs: 100,
        ..SimConfig::default()
    };
    assert!(base.cloud_exec_ms < base.worker_exec_ms);
    let worker = scenario_summary(&run(&base), Scenario::Worker);
    let cloud = scenario_summary(
        &run(&SimConfig {
            latency_tolerant: true,
            ..base.clone()
        }),
        Scenario::Cloud,
    );
    suite.check(
        "cloud vs worker",
        worker.jobs == 100 && cloud.jobs == 100 && cloud.latency_ms > worker.latency_ms && cloud.execution_ms < worker.execution_ms,
        format!(
            "latency cloud {:.2} > worker {:.2}; execution cloud {:.2} < worker {:.2} (ms, 100 jobs each)",
            cloud.latency_ms, worker.latency_ms, cloud.execution_ms, worker.execution_ms
        ),
    );
}

fn ensemble_costs(suite: &mut Suite) {
    let single_cfg = SimConfig {
        n_workers: 2,
        ..SimConfig::default()
    };
    let single = run(&single_cfg);
    let ens = run(&SimConfig {
        ensemble: true,
        ..single_cfg
    });
    let (js, je) = (single.report.overall.jitter_ms, ens.report.overall.jitter_ms);
    let (bs, be) = (single.report.bandwidth.total_bytes, ens.report.bandwidth.total_bytes);
    suite.check(
        "ensemble jitter and bandwidth",
        je >= js && be > bs,
        format!("jitter ensemble {je:.3} >= single {js:.3} ms; job bytes ensemble {be} > single {bs}"),
    );
}

fn determinism(suite: &mut Suite) {
    let configs = [
        SimConfig::default(),
        SimConfig {
            n_workers: 4,
            ensemble: true,
            load_check_ms: 50.0,
            ..SimConfig::default()
        },
        SimConfig {
            latency_tolerant: true,
            cloud_down: true,
            seed: 9,
            ..SimConfig::default()
        },
        SimConfig {
            n_workers: 0,
            inter_arrival_ms: 5.0,
            seed: 3,
            ..SimConfig::default()
        },
    ];
    let mut identical = 0;
    for cfg in &configs {
        let a = sim::traces_to_json(&run(cfg).traces);
        let b = sim::traces_to_json(&run(cfg).traces);
        if a.as_bytes() == b.as_bytes() {
            identical += 1;
        }
    }
    suite.check(
        "determinism",
        identical == configs.len(),
        format!("{identical}/{} scenarios gave byte-identical trace JSON on a second run", configs.len()),
    );
}

fn protocol_golden(suite: &mut Suite) {
    let mut mismatched = Vec::new();
    let cases = golden::cases();
    for (name, body, reencode) in &cases {
        let frozen = std::fs::read_to_string(golden::fixture(name)).unwrap_or_default();
        let frozen = frozen.trim_end();
        if frozen != body || reencode(frozen) != frozen {
            mismatched.push(*name);
        }
    }
    suite.check(
        "protocol golden files",
        mismatched.is_empty(),
        format!(
            "{} message types encoded and round-tripped against frozen fixtures; mismatched: {:?}",
            cases.len(),
            mismatched
        ),
    );
}

fn main() {
    let records = records();
    let mut suite = Suite::default();
    accuracy(&mut suite, &records);
    confidence_gate(&mut suite, &records);
    gradients(&mut suite, &records);
    arbitration(&mut suite);
    cloud_vs_worker(&mut suite);
    ensemble_costs(&mut suite);
    determinism(&mut suite);
    protocol_golden(&mut suite);
    println!("{} of {} criteria passed", suite.total - suite.failed.len(), suite.total);
    if !suite.failed.is_empty() {
        std::process::exit(1);
    }
}
