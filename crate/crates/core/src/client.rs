//! Local training on one client.
//!
//! [`client_update`] runs the dual-model procedure: a personalized model θ is
//! cloned from the incoming global model `w`, every mini-batch is filtered by
//! both models' selectors, and each model takes its gradient step on the
//! samples its peer kept. The two models are tied by a distance regularizer
//! `(λ/2)‖θ − w‖²`. Per batch `b`:
//!
//! ```text
//! θ ← θ − ζ (∇ℓ(b_w; θ) + λ (θ − w))
//! w ← w − ηλ (w − θ)
//! w ← w − η ∇ℓ(b_θ; w)
//! ```
//!
//! where `b_w`/`b_θ` are the samples selected by `w`/`θ` (all samples during
//! warm-up rounds) and `ℓ` is cross-entropy plus the confidence regularizer.
//! The baselines (local SGD for FedAvg/FedProx and the single-model sieve)
//! live here too since they share the batching machinery.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::losses::{loss_and_grad, ConfidenceReg, select_clean_from_logits, LabelPrior, SelectionMask};
use crate::nn::{Architecture, Batch, ParamVector};
use crate::noise::ClientDataset;
use crate::rng::SimRng;

/// Single-component removals of the dual-model procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Confidence regularizer off (β = 0).
    NoCr,
    /// Distance regularizer off: no λ coupling between θ and w.
    NoDr,
    /// No alternate updates: each model trains on its own selection.
    NoAu,
    /// No personalized model: w selects for itself.
    NoPm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoCr, Ablation::NoDr, Ablation::NoAu, Ablation::NoPm];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoCr => "no_cr",
            Ablation::NoDr => "no_dr",
            Ablation::NoAu => "no_au",
            Ablation::NoPm => "no_pm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s)
    }
}

fn yes() -> bool {
    true
}

/// Hyperparameters of one local update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalHyper {
    pub epochs: usize,
    pub batch_size: usize,
    /// Distance-regularizer weight λ.
    pub lambda: f64,
    /// Learning rate η of the global model (and of every baseline).
    pub eta: f64,
    /// Learning rate ζ of the personalized model.
    pub zeta: f64,
    /// Confidence-regularizer weight β.
    pub beta: f64,
    /// Rounds `t <= warmup_rounds` train on every sample.
    pub warmup_rounds: usize,
    #[serde(default = "yes")]
    pub use_cr: bool,
    #[serde(default = "yes")]
    pub use_dr: bool,
    #[serde(default = "yes")]
    pub use_au: bool,
    #[serde(default = "yes")]
    pub use_pm: bool,
    /// Keep θ across rounds instead of re-cloning it from `w`.
    #[serde(default)]
    pub persist_theta: bool,
    /// Probability floor inside the confidence regularizer; 0 is exact.
    #[serde(default)]
    pub cr_floor: f64,
    /// First round with the confidence regularizer on (0: from the start).
    #[serde(default)]
    pub cr_start: usize,
    /// Rounds over which β grows linearly to its full value after `cr_start`.
    #[serde(default)]
    pub cr_ramp: usize,
}

impl LocalHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FedError::config("local.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(FedError::config("local.batch_size", "must be positive"));
        }
        for (name, v) in [
            ("local.lambda", self.lambda),
            ("local.zeta", self.zeta),
            ("local.beta", self.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FedError::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.cr_floor) {
            return Err(FedError::config(
                "local.cr_floor",
                format!("must lie in [0, 1), got {}", self.cr_floor),
            ));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(FedError::config(
                "local.eta",
                format!("must be finite and > 0, got {}", self.eta),
            ));
        }
        if !self.use_pm && (!self.use_au || !self.use_dr) {
            return Err(FedError::config(
                "local.use_pm",
                "removing the personalized model leaves nothing for use_au/use_dr to toggle",
            ));
        }
        Ok(())
    }

    pub fn ablations(&self) -> Vec<Ablation> {
        let mut out = Vec::new();
        if !self.use_cr {
            out.push(Ablation::NoCr);
        }
        if !self.use_dr {
            out.push(Ablation::NoDr);
        }
        if !self.use_au {
            out.push(Ablation::NoAu);
        }
        if !self.use_pm {
            out.push(Ablation::NoPm);
        }
        out
    }

    /// Copy with exactly `variant` switched off.
    pub fn with_ablation(&self, variant: Ablation) -> Result<LocalHyper> {
        if let Some(existing) = self.ablations().first() {
            return Err(FedError::config(
                "local",
                format!(
                    "cannot apply {} on top of {}: one ablation at a time",
                    variant.name(),
                    existing.name()
                ),
            ));
        }
        let mut h = self.clone();
        match variant {
            Ablation::NoCr => h.use_cr = false,
            Ablation::NoDr => h.use_dr = false,
            Ablation::NoAu => h.use_au = false,
            Ablation::NoPm => h.use_pm = false,
        }
        Ok(h)
    }

    /// Confidence-regularizer weight in effect at `round`.
    pub fn beta_at(&self, round: usize) -> f64 {
        if !self.use_cr || round < self.cr_start {
            return 0.0;
        }
        let done = round - self.cr_start;
        if done >= self.cr_ramp {
            self.beta
        } else {
            self.beta * (done + 1) as f64 / self.cr_ramp as f64
        }
    }

    fn regularizer(&self, round: usize) -> ConfidenceReg {
        ConfidenceReg {
            beta: self.beta_at(round),
            floor: self.cr_floor,
        }
    }

    fn effective_lambda(&self) -> f64 {
        if self.use_dr {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn is_warmup(&self, round: usize) -> bool {
        round <= self.warmup_rounds
    }
}

/// A client as seen by the local procedure.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub dataset: ClientDataset,
    pub prior: LabelPrior,
    /// Personalized model kept between rounds when `persist_theta` is set.
    pub theta: Option<ParamVector>,
}

impl ClientState {
    /// Builds the state; the prior comes from this client's noisy labels.
    pub fn new(dataset: ClientDataset, classes: usize) -> Result<Self> {
        let prior = LabelPrior::from_labels(&dataset.noisy_labels, classes)?;
        Ok(ClientState {
            id: dataset.id,
            dataset,
            prior,
            theta: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdateResult {
    pub client: usize,
    /// Updated global-model copy `w`.
    pub params: ParamVector,
    /// Mean number of selected samples per epoch, the aggregation weight.
    pub n_bar: f64,
    /// Selected-sample count of each epoch.
    pub selected_per_epoch: Vec<usize>,
    /// Final-epoch selector flags per local example (`true` = kept as clean);
    /// `None` when no selection ran (warm-up rounds, FedAvg/FedProx).
    pub detection: Option<SelectionMask>,
    /// Personalized model after the update, if one was trained.
    pub theta: Option<ParamVector>,
}

/// Mini-batch index lists for every epoch: a fresh shuffle per epoch from
/// the given seed, chunks of `batch_size`, short last batch kept.
pub fn batch_schedule(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = SimRng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

fn gather(dataset: &ClientDataset, rows: &[usize]) -> Batch {
    Batch {
        features: dataset.features.gather(rows),
        labels: rows.iter().map(|&i| dataset.noisy_labels[i]).collect(),
    }
}

fn subset(batch: &Batch, keep: &[usize]) -> Batch {
    Batch {
        features: batch.features.gather(keep),
        labels: keep.iter().map(|&i| batch.labels[i]).collect(),
    }
}

fn select(arch: &Architecture, params: &ParamVector, batch: &Batch) -> Result<SelectionMask> {
    let logits = arch.forward(params, &batch.features)?;
    Ok(select_clean_from_logits(&logits, &batch.labels))
}

/// Mean-loss gradient on the kept rows of `batch`; `None` if nothing is kept.
fn grad_on(
    arch: &Architecture,
    params: &ParamVector,
    batch: &Batch,
    keep: &[usize],
    prior: &LabelPrior,
    reg: ConfidenceReg,
) -> Result<Option<ParamVector>> {
    if keep.is_empty() {
        return Ok(None);
    }
    let (_, g) = if keep.len() == batch.len() {
        loss_and_grad(arch, params, batch, prior, reg)?
    } else {
        loss_and_grad(arch, params, &subset(batch, keep), prior, reg)?
    };
    Ok(Some(g))
}

fn ensure_finite(params: &ParamVector, what: &str, client: usize, round: usize) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(FedError::Numeric(format!(
            "{what} of client {client} became non-finite in round {round}"
        )))
    }
}

fn check_inputs(arch: &Architecture, state: &ClientState, w_in: &ParamVector, hyper: &LocalHyper) -> Result<()> {
    hyper.validate()?;
    if w_in.len() != arch.param_count() {
        return Err(FedError::config(
            "params",
            format!(
                "incoming model has {} parameters, architecture needs {}",
                w_in.len(),
                arch.param_count()
            ),
        ));
    }
    if state.dataset.is_empty() {
        return Err(FedError::config(
            "client",
            format!("client {} holds no samples", state.id),
        ));
    }
    Ok(())
}

/// Records the flags of a batch into a per-example mask.
fn record(mask: &mut [bool], rows: &[usize], flags: &SelectionMask) {
    for (&r, &f) in rows.iter().zip(flags.flags()) {
        mask[r] = f;
    }
}

/// One dual-model local update starting from the global model `w_in`.
pub fn client_update(
    arch: &Architecture,
    round: usize,
    state: &ClientState,
    w_in: &ParamVector,
    hyper: &LocalHyper,
    seed: u64,
) -> Result<ClientUpdateResult> {
    check_inputs(arch, state, w_in, hyper)?;
    if !hyper.use_pm {
        return sieve_update(arch, round, state, w_in, hyper, seed);
    }
    let data = &state.dataset;
    let n = data.len();
    let reg = hyper.regularizer(round);
    let lambda = hyper.effective_lambda();
    let (eta, zeta) = (hyper.eta, hyper.zeta);
    let warmup = hyper.is_warmup(round);

    let mut w = w_in.clone();
    let mut theta = match (&state.theta, hyper.persist_theta) {
        (Some(t), true) => t.clone(),
        _ => w_in.clone(),
    };
    let mut selected_per_epoch = Vec::with_capacity(hyper.epochs);
    let mut detection = vec![true; n];

    let schedule = batch_schedule(n, hyper.batch_size, hyper.epochs, seed);
    for epoch in &schedule {
        let mut selected = 0;
        for rows in epoch {
            let batch = gather(data, rows);
            let every: Vec<usize> = (0..batch.len()).collect();
            let (by_w, by_theta) = if warmup {
                (every.clone(), every)
            } else {
                let mw = select(arch, &w, &batch)?;
                let mt = select(arch, &theta, &batch)?;
                record(&mut detection, rows, &mt);
                (mw.selected(), mt.selected())
            };
            selected += by_theta.len();

            // θ trains on the samples w kept; without alternate updates it
            // keeps its own selection (and w keeps its own below).
            let theta_rows = if hyper.use_au { &by_w } else { &by_theta };
            let w_rows = if hyper.use_au { &by_theta } else { &by_w };

            let g_theta = grad_on(arch, &theta, &batch, theta_rows, &state.prior, reg)?;
            personal_step(&mut theta, &w, g_theta.as_ref(), zeta, lambda);
            distance_pull(&mut w, &theta, eta, lambda);
            if let Some(g) = grad_on(arch, &w, &batch, w_rows, &state.prior, reg)? {
                w.axpy(-eta, &g);
            }
        }
        selected_per_epoch.push(selected);
    }
    ensure_finite(&w, "global model", state.id, round)?;
    ensure_finite(&theta, "personalized model", state.id, round)?;

    Ok(ClientUpdateResult {
        client: state.id,
        params: w,
        n_bar: mean_count(&selected_per_epoch),
        selected_per_epoch,
        detection: (!warmup).then(|| SelectionMask::from_flags(detection)),
        theta: Some(theta),
    })
}

/// `θ ← θ − ζ (g + λ (θ − w))`; a missing gradient counts as zero.
pub fn personal_step(theta: &mut ParamVector, w: &ParamVector, grad: Option<&ParamVector>, zeta: f64, lambda: f64) {
    let t = theta.as_mut_slice();
    match grad {
        Some(g) => {
            for ((ti, &wi), &gi) in t.iter_mut().zip(w.as_slice()).zip(g.as_slice()) {
                *ti -= zeta * (gi + lambda * (*ti - wi));
            }
        }
        None => {
            for (ti, &wi) in t.iter_mut().zip(w.as_slice()) {
                *ti -= zeta * (lambda * (*ti - wi));
            }
        }
    }
}

/// `w ← w − ηλ (w − θ)`
pub fn distance_pull(w: &mut ParamVector, theta: &ParamVector, eta: f64, lambda: f64) {
    for (wi, &ti) in w.as_mut_slice().iter_mut().zip(theta.as_slice()) {
        *wi -= eta * lambda * (*wi - ti);
    }
}

/// Mean cross-entropy plus `(μ/2)‖w − anchor‖²` and its gradient.
pub fn prox_loss_and_grad(
    arch: &Architecture,
    params: &ParamVector,
    anchor: &ParamVector,
    batch: &Batch,
    mu: f64,
) -> Result<(f64, ParamVector)> {
    let (losses, mut g) = crate::nn::ce_loss_and_grad(arch, params, batch)?;
    let mut loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if mu > 0.0 {
        loss += 0.5 * mu * params.squared_distance(anchor);
        for ((gi, &wi), &ai) in g.as_mut_slice().iter_mut().zip(params.as_slice()).zip(anchor.as_slice()) {
            *gi += mu * (wi - ai);
        }
    }
    if !loss.is_finite() {
        return Err(FedError::Numeric(format!("non-finite local SGD loss {loss}")));
    }
    Ok((loss, g))
}

fn mean_count(per_epoch: &[usize]) -> f64 {
    per_epoch.iter().sum::<usize>() as f64 / per_epoch.len() as f64
}

/// Applies exactly one ablation to an unablated configuration and runs
/// [`client_update`].
pub fn run_ablation_variant(
    variant: Ablation,
    arch: &Architecture,
    round: usize,
    state: &ClientState,
    w_in: &ParamVector,
    hyper: &LocalHyper,
    seed: u64,
) -> Result<ClientUpdateResult> {
    let hyper = hyper.with_ablation(variant)?;
    client_update(arch, round, state, w_in, &hyper, seed)
}

/// Single-model sieve: after warm-up the model keeps only the samples its own
/// selector flags as clean and trains on them with CE plus the confidence
/// regularizer. The aggregation weight is the mean selected count.
pub fn sieve_update(
    arch: &Architecture,
    round: usize,
    state: &ClientState,
    w_in: &ParamVector,
    hyper: &LocalHyper,
    seed: u64,
) -> Result<ClientUpdateResult> {
    check_inputs(arch, state, w_in, hyper)?;
    let data = &state.dataset;
    let n = data.len();
    let reg = hyper.regularizer(round);
    let warmup = hyper.is_warmup(round);
    let mut w = w_in.clone();
    let mut selected_per_epoch = Vec::with_capacity(hyper.epochs);
    let mut detection = vec![true; n];
    for epoch in &batch_schedule(n, hyper.batch_size, hyper.epochs, seed) {
        let mut selected = 0;
        for rows in epoch {
            let batch = gather(data, rows);
            let keep = if warmup {
                (0..batch.len()).collect()
            } else {
                let m = select(arch, &w, &batch)?;
                record(&mut detection, rows, &m);
                m.selected()
            };
            selected += keep.len();
            if let Some(g) = grad_on(arch, &w, &batch, &keep, &state.prior, reg)? {
                w.axpy(-hyper.eta, &g);
            }
        }
        selected_per_epoch.push(selected);
    }
    ensure_finite(&w, "model", state.id, round)?;
    Ok(ClientUpdateResult {
        client: state.id,
        params: w,
        n_bar: mean_count(&selected_per_epoch),
        selected_per_epoch,
        detection: (!warmup).then(|| SelectionMask::from_flags(detection)),
        theta: None,
    })
}

/// Plain local SGD on cross-entropy over every sample (FedAvg), optionally
/// with the proximal term `(μ/2)‖w − w_in‖²` (FedProx).
pub fn local_sgd_update(
    arch: &Architecture,
    state: &ClientState,
    w_in: &ParamVector,
    hyper: &LocalHyper,
    prox_mu: f64,
    seed: u64,
) -> Result<ClientUpdateResult> {
    check_inputs(arch, state, w_in, hyper)?;
    if !(prox_mu >= 0.0) {
        return Err(FedError::config("federation.method.mu", "must be >= 0"));
    }
    let data = &state.dataset;
    let n = data.len();
    let mut w = w_in.clone();
    for epoch in &batch_schedule(n, hyper.batch_size, hyper.epochs, seed) {
        for rows in epoch {
            let batch = gather(data, rows);
            let (_, g) = prox_loss_and_grad(arch, &w, w_in, &batch, prox_mu)?;
            w.axpy(-hyper.eta, &g);
        }
    }
    ensure_finite(&w, "model", state.id, 0)?;
    Ok(ClientUpdateResult {
        client: state.id,
        params: w,
        n_bar: n as f64,
        selected_per_epoch: vec![n; hyper.epochs],
        detection: None,
        theta: None,
    })
}
