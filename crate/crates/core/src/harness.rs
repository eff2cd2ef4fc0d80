//! Experiment runner: builds every trial from the config and the master
//! seed, runs the federation, and writes the run artifacts.
//!
//! Files written to the output directory, all named after the config hash:
//! `config_<h>.json`, `rounds_<h>_t<i>.csv`, `clients_<h>_t<i>.csv`,
//! `metrics_<h>_t<i>.json`, `params_<h>_t<i>.bin`, `noise_<h>_t<i>.json`,
//! `log_<h>_t<i>.jsonl` and `summary_<h>.json`. Only the JSONL log carries
//! wall-clock timings; everything else is a pure function of the config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::client::{Ablation, ClientState, LocalHyper};
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{gen_synthetic, load_mnist, RawDataset};
use crate::error::{FedError, Result};
use crate::metrics::{accuracy, detection_scores, outcomes_from_mask, summarize, ClientDetection, MetricsReport};
use crate::nn::ParamVector;
use crate::noise::{build_noise, corrupt, noise_records, partition, ClientNoiseRecord};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::server::{Method, Server};

const PREFIXES: [&str; 9] = [
    "config", "rounds", "clients", "metrics", "params", "noise", "log", "summary", "comparison",
];

/// One line of the per-round CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    /// Space-separated participant ids.
    pub participants: String,
    pub selected_total: f64,
    pub accuracy: Option<f64>,
    /// Mean detection F-score over this round's participants with a mask.
    pub mean_f_score: Option<f64>,
}

/// One line of the per-(round, client) CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub round: usize,
    pub client: usize,
    pub n_bar: f64,
    pub flagged: Option<usize>,
    pub corrupted: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
}

/// Everything one trial produces.
#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub rounds: Vec<RoundRow>,
    pub clients: Vec<ClientRow>,
    pub report: MetricsReport,
    pub params: ParamVector,
    pub noise: Vec<ClientNoiseRecord>,
    /// JSON lines with wall-clock timings.
    pub log: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub status: String,
    pub final_accuracy: Option<f64>,
    pub mean_f_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub method: String,
    pub trials: Vec<TrialSummary>,
    pub accuracy: Option<MeanStd>,
    pub f_score: Option<MeanStd>,
}

impl ExperimentSummary {
    pub fn failed_trials(&self) -> usize {
        self.trials.iter().filter(|t| t.status != "ok").count()
    }
}

fn mean_std(values: &[f64]) -> Option<MeanStd> {
    summarize(values).ok().map(|s| MeanStd {
        count: s.count,
        mean: s.mean,
        std: s.std,
    })
}

/// Seed of trial `i`.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, Stream::Trial, &[trial as u64])
}

/// Short name of the configured strategy, e.g. `fedfixer:no_cr`.
pub fn method_label(method: &Method, local: &LocalHyper) -> String {
    match method {
        Method::FedFixer => {
            let mut label = "fedfixer".to_string();
            for a in local.ablations() {
                label.push(':');
                label.push_str(a.name());
            }
            label
        }
        Method::FedProx { mu } => format!("fedprox:{mu}"),
        Method::FedAvg => "fedavg".into(),
        Method::LocalSieve => "local_sieve".into(),
        Method::GlobalSieve => "global_sieve".into(),
    }
}

/// Parses a method string (`fedfixer`, `fedfixer:no_dr`, `fedavg`,
/// `fedprox`, `fedprox:0.1`, `local_sieve`, `global_sieve`) against a base
/// set of local hyperparameters.
pub fn parse_method(spec: &str, base: &LocalHyper) -> Result<(Method, LocalHyper)> {
    let bad = |msg: String| FedError::config("methods", msg);
    let mut clean = base.clone();
    clean.use_cr = true;
    clean.use_dr = true;
    clean.use_au = true;
    clean.use_pm = true;
    let (head, arg) = match spec.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (spec, None),
    };
    match (head, arg) {
        ("fedfixer", None) => Ok((Method::FedFixer, clean)),
        ("fedfixer", Some(a)) => {
            let variant = Ablation::parse(a).ok_or_else(|| bad(format!("unknown ablation `{a}`")))?;
            Ok((Method::FedFixer, clean.with_ablation(variant)?))
        }
        ("fedavg", None) => Ok((Method::FedAvg, clean)),
        ("fedprox", None) => Ok((Method::FedProx { mu: 0.01 }, clean)),
        ("fedprox", Some(a)) => {
            let mu: f64 = a.parse().map_err(|_| bad(format!("bad fedprox mu `{a}`")))?;
            if !(mu >= 0.0) {
                return Err(bad(format!("fedprox mu must be >= 0, got {mu}")));
            }
            Ok((Method::FedProx { mu }, clean))
        }
        ("local_sieve", None) => Ok((Method::LocalSieve, clean)),
        ("global_sieve", None) => Ok((Method::GlobalSieve, clean)),
        _ => Err(bad(format!("unknown method `{spec}`"))),
    }
}

/// Data shared by all trials (MNIST is read once).
pub fn load_base(config: &ExperimentConfig) -> Result<Option<(RawDataset, RawDataset)>> {
    match &config.dataset {
        DatasetSpec::Mnist { dir, .. } => load_mnist(dir).map(Some),
        DatasetSpec::Synthetic(_) => Ok(None),
    }
}

/// Train and test sets of one trial.
pub fn trial_data(
    config: &ExperimentConfig,
    base: Option<&(RawDataset, RawDataset)>,
    seed: u64,
) -> Result<(RawDataset, RawDataset)> {
    match &config.dataset {
        DatasetSpec::Mnist {
            train_samples,
            test_samples,
            ..
        } => {
            let (train, test) = base.ok_or_else(|| FedError::config("dataset", "MNIST data not loaded"))?;
            let train = match train_samples {
                Some(n) if *n < train.len() => {
                    let mut rng = rng_for(seed, Stream::Data, &[0]);
                    let mut picked = index::sample(&mut rng, train.len(), *n).into_vec();
                    picked.sort_unstable();
                    train.subset(&picked)
                }
                _ => train.clone(),
            };
            let test = match test_samples {
                Some(n) if *n < test.len() => test.subset(&(0..*n).collect::<Vec<_>>()),
                _ => test.clone(),
            };
            Ok((train, test))
        }
        DatasetSpec::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(seed, Stream::Data, &[spec.seed]);
            gen_synthetic(&spec)
        }
    }
}

fn evaluate(server: &Server, test: &RawDataset) -> Result<f64> {
    let arch = server.architecture();
    if server.local_models().is_empty() {
        accuracy(arch, server.global(), test)
    } else {
        let mut total = 0.0;
        for m in server.local_models() {
            total += accuracy(arch, m, test)?;
        }
        Ok(total / server.local_models().len() as f64)
    }
}

/// Runs one trial in memory.
pub fn simulate_trial(
    config: &ExperimentConfig,
    train: &RawDataset,
    test: &RawDataset,
    seed: u64,
    threads: usize,
) -> Result<TrialOutput> {
    let classes = config.dataset.classes();
    let shards = partition(train, &config.partition, seed)?;
    let noise = build_noise(&config.noise, shards.len(), classes, seed)?;
    let corrupted: Vec<_> = shards
        .iter()
        .zip(&noise)
        .map(|(c, n)| corrupt(c, &n.transition, seed))
        .collect();
    let records = noise_records(&corrupted, &noise);
    let states = corrupted
        .into_iter()
        .map(|c| ClientState::new(c, classes))
        .collect::<Result<Vec<_>>>()?;
    let init = config.model.init_params(seed)?;
    let mut server = Server::new(
        config.model.clone(),
        config.federation.clone(),
        config.local.clone(),
        states,
        init,
        seed,
        threads,
    )?;

    let total_rounds = config.federation.rounds;
    let mut rounds = Vec::with_capacity(total_rounds);
    let mut client_rows = Vec::new();
    let mut log = Vec::with_capacity(total_rounds);
    let mut last_accuracy = 0.0;
    for t in 0..total_rounds {
        let record = server.run_round(t)?;
        if !record.params.is_finite() {
            return Err(FedError::Numeric(format!("global model diverged in round {t}")));
        }
        let mut fs = Vec::new();
        for (i, &k) in record.participants.iter().enumerate() {
            let flags = &server.clients()[k].dataset.corrupted;
            let mut row = ClientRow {
                round: t,
                client: k,
                n_bar: record.n_bar[i],
                flagged: None,
                corrupted: flags.iter().filter(|&&c| c).count(),
                precision: None,
                recall: None,
                f_score: None,
            };
            if let Some(mask) = &record.detection[i] {
                let s = detection_scores(&outcomes_from_mask(mask, flags));
                row.flagged = Some(mask.len() - mask.count_selected());
                row.precision = Some(s.precision);
                row.recall = Some(s.recall);
                row.f_score = Some(s.f_score);
                fs.push(s.f_score);
            }
            client_rows.push(row);
        }
        let evaluate_now = (t + 1) % config.federation.eval_every == 0 || t + 1 == total_rounds;
        let acc = if evaluate_now {
            last_accuracy = evaluate(&server, test)?;
            log::info!("round {t}: accuracy {last_accuracy:.4}");
            Some(last_accuracy)
        } else {
            None
        };
        log.push(serde_json::to_string(&record)?);
        rounds.push(RoundRow {
            round: t,
            participants: record
                .participants
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            selected_total: record.n_bar.iter().sum(),
            accuracy: acc,
            mean_f_score: mean_std(&fs).map(|m| m.mean),
        });
    }

    let mut detections = Vec::new();
    for (k, mask) in server.latest_detection().iter().enumerate() {
        if let Some(mask) = mask {
            let scores = detection_scores(&outcomes_from_mask(mask, &server.clients()[k].dataset.corrupted));
            detections.push(ClientDetection { client: k, scores });
        }
    }
    let report = MetricsReport::new(total_rounds - 1, last_accuracy, detections)?;
    Ok(TrialOutput {
        rounds,
        clients: client_rows,
        report,
        params: server.global().clone(),
        noise: records,
        log,
    })
}

/// Fails when `dir` holds artifacts of a different config.
pub fn check_output_dir(dir: &Path, hash: &str) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().into_owned();
        for prefix in PREFIXES {
            if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('_')) {
                let other: String = rest.chars().take(12).collect();
                if other != hash {
                    return Err(FedError::config(
                        "out_dir",
                        format!(
                            "{} holds `{name}` from config {other}, not {hash}; use a fresh directory",
                            dir.display()
                        ),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_trial(dir: &Path, hash: &str, trial: usize, out: &TrialOutput) -> Result<()> {
    write_csv(&dir.join(format!("rounds_{hash}_t{trial}.csv")), &out.rounds)?;
    write_csv(&dir.join(format!("clients_{hash}_t{trial}.csv")), &out.clients)?;
    write_json(&dir.join(format!("metrics_{hash}_t{trial}.json")), &out.report)?;
    write_json(&dir.join(format!("noise_{hash}_t{trial}.json")), &out.noise)?;
    fs::write(dir.join(format!("params_{hash}_t{trial}.bin")), out.params.to_le_bytes())?;
    let mut log = fs::File::create(dir.join(format!("log_{hash}_t{trial}.jsonl")))?;
    for line in &out.log {
        writeln!(log, "{line}")?;
    }
    Ok(())
}

/// Runs every trial of `config`, writing artifacts to `out`. A trial whose
/// training goes non-finite is recorded as failed; the others still run.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, threads: usize) -> Result<ExperimentSummary> {
    config.validate()?;
    let hash = config.hash();
    check_output_dir(out, &hash)?;
    fs::create_dir_all(out)?;
    let mut stored = config.clone();
    stored.out_dir = out.to_path_buf();
    write_json(&out.join(format!("config_{hash}.json")), &stored)?;

    let base = load_base(config)?;
    let mut trials = Vec::with_capacity(config.trials);
    for i in 0..config.trials {
        let seed = trial_seed(config.seed, i);
        let (train, test) = trial_data(config, base.as_ref(), seed)?;
        match simulate_trial(config, &train, &test, seed, threads) {
            Ok(output) => {
                write_trial(out, &hash, i, &output)?;
                trials.push(TrialSummary {
                    trial: i,
                    seed,
                    status: "ok".into(),
                    final_accuracy: Some(output.report.accuracy),
                    mean_f_score: output.report.f_score_summary.map(|s| s.mean),
                    error: None,
                });
            }
            Err(FedError::Numeric(msg)) => {
                log::error!("trial {i} aborted: {msg}");
                trials.push(TrialSummary {
                    trial: i,
                    seed,
                    status: "failed".into(),
                    final_accuracy: None,
                    mean_f_score: None,
                    error: Some(msg),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let acc: Vec<f64> = trials.iter().filter_map(|t| t.final_accuracy).collect();
    let f: Vec<f64> = trials.iter().filter_map(|t| t.mean_f_score).collect();
    let summary = ExperimentSummary {
        config_hash: hash.clone(),
        method: method_label(&config.federation.method, &config.local),
        trials,
        accuracy: mean_std(&acc),
        f_score: mean_std(&f),
    };
    write_json(&out.join(format!("summary_{hash}.json")), &summary)?;
    Ok(summary)
}

/// One row of a method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub config_hash: String,
    pub trials: usize,
    pub failed: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub f_score_mean: Option<f64>,
    /// Space-separated per-trial accuracies.
    pub accuracies: String,
}

/// Runs each method on the same data, partition, noise and initial model
/// (the master seed is shared), one subdirectory per method.
pub fn compare_methods(
    config: &ExperimentConfig,
    methods: &[String],
    out: &Path,
    threads: usize,
) -> Result<Vec<ComparisonRow>> {
    if methods.is_empty() {
        return Err(FedError::config("methods", "no methods given"));
    }
    let parsed = methods
        .iter()
        .map(|m| parse_method(m.trim(), &config.local))
        .collect::<Result<Vec<_>>>()?;
    let hash = config.hash();
    check_output_dir(out, &hash)?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(parsed.len());
    for (method, local) in parsed {
        let mut c = config.clone();
        c.federation.method = method;
        c.local = local;
        let label = method_label(&c.federation.method, &c.local);
        let dir: PathBuf = out.join(label.replace(':', "-"));
        let summary = run_experiment(&c, &dir, threads)?;
        rows.push(ComparisonRow {
            method: label,
            config_hash: summary.config_hash.clone(),
            trials: summary.trials.len(),
            failed: summary.failed_trials(),
            accuracy_mean: summary.accuracy.map(|a| a.mean),
            accuracy_std: summary.accuracy.map(|a| a.std),
            f_score_mean: summary.f_score.map(|f| f.mean),
            accuracies: summary
                .trials
                .iter()
                .map(|t| t.final_accuracy.map_or("nan".to_string(), |a| a.to_string()))
                .collect::<Vec<_>>()
                .join(" "),
        });
    }
    write_csv(&out.join(format!("comparison_{hash}.csv")), &rows)?;
    Ok(rows)
}

/// Plain-text table of a comparison.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut s = format!("{:<22} {:>10} {:>8} {:>10} {:>7}\n", "method", "acc(%)", "std", "F(%)", "failed");
    for r in rows {
        s.push_str(&format!(
            "{:<22} {:>10} {:>8} {:>10} {:>7}\n",
            r.method,
            pct(r.accuracy_mean),
            pct(r.accuracy_std),
            pct(r.f_score_mean),
            r.failed
        ));
    }
    s
}
