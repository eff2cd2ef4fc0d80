//! Federated rounds: client sampling, dispatch and damped weighted
//! aggregation `w ← (1 − γ) w + γ Σ_k (n̄_k / n̄) w_k`.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{client_update, local_sgd_update, sieve_update, ClientState, ClientUpdateResult, LocalHyper};
use crate::error::{FedError, Result};
use crate::losses::SelectionMask;
use crate::nn::{Architecture, ParamVector};
use crate::rng::{derive_seed, rng_for, Stream};

fn default_mu() -> f64 {
    0.01
}

/// Training strategy run on every participating client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Dual-model procedure of [`client_update`].
    FedFixer,
    FedAvg,
    FedProx {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    /// Single-model sieve trained per client, never aggregated.
    LocalSieve,
    /// Single-model sieve with selected-count-weighted aggregation.
    GlobalSieve,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::FedFixer => "fedfixer".into(),
            Method::FedAvg => "fedavg".into(),
            Method::FedProx { mu } => format!("fedprox(mu={mu})"),
            Method::LocalSieve => "local_sieve".into(),
            Method::GlobalSieve => "global_sieve".into(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn every_round() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Fraction C of clients sampled per round.
    pub fraction: f64,
    pub rounds: usize,
    /// Server mixing weight γ.
    #[serde(default = "one")]
    pub gamma: f64,
    pub method: Method,
    /// Evaluate test accuracy every this many rounds (the last round always).
    #[serde(default = "every_round")]
    pub eval_every: usize,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(FedError::config(
                "federation.fraction",
                format!("must lie in (0, 1], got {}", self.fraction),
            ));
        }
        if self.rounds == 0 {
            return Err(FedError::config("federation.rounds", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(FedError::config(
                "federation.gamma",
                format!("must lie in [0, 1], got {}", self.gamma),
            ));
        }
        if self.eval_every == 0 {
            return Err(FedError::config("federation.eval_every", "must be positive"));
        }
        if let Method::FedProx { mu } = self.method {
            if !(mu >= 0.0) {
                return Err(FedError::config("federation.method.mu", "must be >= 0"));
            }
        }
        Ok(())
    }

    /// `max(round(C · K), 1)` clients per round.
    pub fn clients_per_round(&self, total: usize) -> usize {
        ((self.fraction * total as f64).round() as usize).clamp(1, total.max(1))
    }
}

/// Damped weighted average of client models. Results are combined in
/// ascending client order so the floating-point sum does not depend on the
/// order they arrive in. With no selected samples at all, `w_t` is kept.
pub fn aggregate(w_t: &ParamVector, results: &[ClientUpdateResult], gamma: f64) -> Result<ParamVector> {
    if let Some(bad) = results.iter().find(|r| r.params.len() != w_t.len()) {
        return Err(FedError::config(
            "aggregate",
            format!(
                "client {} sent {} parameters, expected {}",
                bad.client,
                bad.params.len(),
                w_t.len()
            ),
        ));
    }
    let mut order: Vec<&ClientUpdateResult> = results.iter().collect();
    order.sort_by_key(|r| r.client);
    let total: f64 = order.iter().map(|r| r.n_bar).sum();
    if !(total > 0.0) {
        log::warn!("no selected samples among {} clients; keeping the global model", results.len());
        return Ok(w_t.clone());
    }
    let mut mixed = vec![0.0; w_t.len()];
    for r in &order {
        let weight = r.n_bar / total;
        for (m, v) in mixed.iter_mut().zip(r.params.as_slice()) {
            *m += weight * v;
        }
    }
    let out = w_t
        .as_slice()
        .iter()
        .zip(&mixed)
        .map(|(w, m)| (1.0 - gamma) * w + gamma * m)
        .collect();
    ParamVector::from_vec(out)
}

/// Runs a non-FedFixer strategy's local update.
pub fn baseline_update(
    method: &Method,
    arch: &Architecture,
    round: usize,
    state: &ClientState,
    w_in: &ParamVector,
    hyper: &LocalHyper,
    seed: u64,
) -> Result<ClientUpdateResult> {
    match method {
        Method::FedAvg => local_sgd_update(arch, state, w_in, hyper, 0.0, seed),
        Method::FedProx { mu } => local_sgd_update(arch, state, w_in, hyper, *mu, seed),
        Method::GlobalSieve | Method::LocalSieve => sieve_update(arch, round, state, w_in, hyper, seed),
        Method::FedFixer => Err(FedError::config(
            "federation.method",
            "fedfixer is not a baseline; use client_update",
        )),
    }
}

/// Summary of one federated round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub n_bar: Vec<f64>,
    /// Aggregation weights `n̄_k / n̄`, aligned with `participants`.
    pub weights: Vec<f64>,
    pub duration_ms: f64,
    /// Final-epoch selector flags per participant (not serialized).
    #[serde(skip)]
    pub detection: Vec<Option<SelectionMask>>,
    /// Global model after aggregation (not serialized).
    #[serde(skip)]
    pub params: ParamVector,
}

/// Owns the federation state across rounds.
pub struct Server {
    arch: Architecture,
    config: FederationConfig,
    hyper: LocalHyper,
    clients: Vec<ClientState>,
    global: ParamVector,
    /// Per-client models for [`Method::LocalSieve`].
    local_models: Vec<ParamVector>,
    latest_detection: Vec<Option<SelectionMask>>,
    seed: u64,
    pool: rayon::ThreadPool,
}

impl Server {
    pub fn new(
        arch: Architecture,
        config: FederationConfig,
        hyper: LocalHyper,
        clients: Vec<ClientState>,
        init: ParamVector,
        seed: u64,
        threads: usize,
    ) -> Result<Self> {
        config.validate()?;
        hyper.validate()?;
        arch.validate()?;
        if clients.is_empty() {
            return Err(FedError::config("partition.clients", "no clients"));
        }
        if init.len() != arch.param_count() {
            return Err(FedError::config("params", "initial model does not match the architecture"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| FedError::config("threads", e.to_string()))?;
        let local_models = match config.method {
            Method::LocalSieve => vec![init.clone(); clients.len()],
            _ => Vec::new(),
        };
        Ok(Server {
            latest_detection: vec![None; clients.len()],
            arch,
            config,
            hyper,
            clients,
            global: init,
            local_models,
            seed,
            pool,
        })
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Per-client models of a local-only run (empty otherwise).
    pub fn local_models(&self) -> &[ParamVector] {
        &self.local_models
    }

    /// Most recent post-warm-up selector flags of each client.
    pub fn latest_detection(&self) -> &[Option<SelectionMask>] {
        &self.latest_detection
    }

    /// Clients taking part in `round`, sampled without replacement.
    pub fn sample_clients(&self, round: usize) -> Vec<usize> {
        let k = self.clients.len();
        let m = self.config.clients_per_round(k);
        let mut rng = rng_for(self.seed, Stream::ClientSampling, &[round as u64]);
        let mut ids = index::sample(&mut rng, k, m).into_vec();
        ids.sort_unstable();
        ids
    }

    pub fn run_round(&mut self, round: usize) -> Result<RoundRecord> {
        if round >= self.config.rounds {
            return Err(FedError::config(
                "round",
                format!("round {round} is past the configured {}", self.config.rounds),
            ));
        }
        let started = Instant::now();
        let participants = self.sample_clients(round);
        let (arch, hyper, method, seed) = (&self.arch, &self.hyper, &self.config.method, self.seed);
        let clients = &self.clients;
        let global = &self.global;
        let local_models = &self.local_models;
        let results: Vec<ClientUpdateResult> = self.pool.install(|| {
            participants
                .par_iter()
                .map(|&k| {
                    let client_seed = derive_seed(seed, Stream::ClientUpdate, &[round as u64, k as u64]);
                    let state = &clients[k];
                    match method {
                        Method::FedFixer => client_update(arch, round, state, global, hyper, client_seed),
                        Method::LocalSieve => {
                            baseline_update(method, arch, round, state, &local_models[k], hyper, client_seed)
                        }
                        _ => baseline_update(method, arch, round, state, global, hyper, client_seed),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let total: f64 = results.iter().map(|r| r.n_bar).sum();
        let weights = results
            .iter()
            .map(|r| if total > 0.0 { r.n_bar / total } else { 0.0 })
            .collect();
        match self.config.method {
            Method::LocalSieve => {
                for r in &results {
                    self.local_models[r.client] = r.params.clone();
                }
            }
            _ => self.global = aggregate(&self.global, &results, self.config.gamma)?,
        }
        for r in &results {
            if self.hyper.persist_theta {
                self.clients[r.client].theta = r.theta.clone();
            }
            if let Some(mask) = &r.detection {
                self.latest_detection[r.client] = Some(mask.clone());
            }
        }
        Ok(RoundRecord {
            round,
            n_bar: results.iter().map(|r| r.n_bar).collect(),
            weights,
            detection: results.iter().map(|r| r.detection.clone()).collect(),
            participants,
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
            params: self.global.clone(),
        })
    }
}
