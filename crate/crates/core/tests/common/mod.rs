#![allow(dead_code)]

pub mod oracle;

use fedfixer::client::{ClientState, LocalHyper};
use fedfixer::nn::{Architecture, Matrix, ParamVector};
use fedfixer::noise::ClientDataset;
use fedfixer::server::{FederationConfig, Method, Server};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A scripted two-client run: sizes of the network, per-client samples and
/// the local hyperparameters.
#[derive(Clone)]
pub struct Scenario {
    pub sizes: Vec<usize>,
    pub samples: usize,
    pub hyper: oracle::Hyper,
    pub rounds: usize,
    pub seed: u64,
}

fn client_data(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let x = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let y = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (x, y)
}

pub struct OracleReport {
    /// Largest absolute difference between engine and oracle global models.
    pub gap: f64,
    /// Engine n̄ per round and client.
    pub selected: Vec<Vec<f64>>,
    /// Batches where w and θ kept different samples.
    pub split_batches: usize,
}

pub fn oracle_gap(s: &Scenario) -> OracleReport {
    let dim = s.sizes[0];
    let classes = *s.sizes.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let data: Vec<_> = (0..2).map(|_| client_data(&mut rng, s.samples, dim, classes)).collect();
    let net = oracle::Net { sizes: s.sizes.clone() };
    let w0: Vec<f64> = (0..net.param_count()).map(|_| rng.gen_range(-0.8..0.8)).collect();

    let arch = Architecture::mlp(dim, s.sizes[1..s.sizes.len() - 1].to_vec(), classes);
    assert_eq!(arch.param_count(), net.param_count());
    let states = data
        .iter()
        .enumerate()
        .map(|(k, (x, y))| {
            let ds = ClientDataset {
                id: k,
                features: Matrix::from_rows(x).unwrap(),
                noisy_labels: y.clone(),
                true_labels: y.clone(),
                corrupted: vec![false; y.len()],
                source_indices: (0..y.len()).collect(),
            };
            ClientState::new(ds, classes).unwrap()
        })
        .collect();
    let h = s.hyper;
    let hyper = LocalHyper {
        epochs: h.epochs,
        batch_size: h.batch,
        lambda: h.lambda,
        eta: h.eta,
        zeta: h.zeta,
        beta: h.beta,
        warmup_rounds: h.warmup,
        use_cr: true,
        use_dr: true,
        use_au: true,
        use_pm: true,
        persist_theta: false,
        cr_floor: h.floor,
        cr_start: 0,
        cr_ramp: 0,
    };
    let fed = FederationConfig {
        fraction: 1.0,
        rounds: s.rounds,
        gamma: h.gamma,
        method: Method::FedFixer,
        eval_every: 1,
    };
    let mut server = Server::new(arch, fed, hyper, states, ParamVector::from_vec(w0.clone()).unwrap(), s.seed, 1).unwrap();
    let clients: Vec<_> = data.into_iter().map(|(x, y)| oracle::Client::new(x, y, classes)).collect();
    let (expected, split_batches) = oracle::run(&net, &clients, &w0, &h, s.rounds, s.seed);
    let mut gap = 0.0f64;
    let mut selected = Vec::new();
    for (t, want) in expected.iter().enumerate() {
        let record = server.run_round(t).unwrap();
        for (a, b) in record.params.as_slice().iter().zip(want) {
            gap = gap.max((a - b).abs());
        }
        selected.push(record.n_bar.clone());
    }
    OracleReport { gap, selected, split_batches }
}

/// Scripted scenarios: a linear (scalar-feature) model and a small MLP,
/// each with two clients and two batches per epoch.
pub fn scenarios() -> Vec<Scenario> {
    let base = oracle::Hyper {
        epochs: 2,
        batch: 3,
        lambda: 0.8,
        eta: 0.4,
        zeta: 0.6,
        beta: 0.5,
        floor: 0.0,
        warmup: 0,
        gamma: 0.7,
    };
    vec![
        Scenario { sizes: vec![1, 2], samples: 6, hyper: base, rounds: 3, seed: 10 },
        Scenario { sizes: vec![3, 4, 3], samples: 6, hyper: base, rounds: 3, seed: 11 },
        Scenario {
            sizes: vec![3, 4, 3],
            samples: 6,
            hyper: oracle::Hyper { beta: 2.0, floor: 1e-3, gamma: 1.0, ..base },
            rounds: 3,
            seed: 9,
        },
    ]
}
