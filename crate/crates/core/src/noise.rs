//! Client partitioning and client-dependent label corruption.
//!
//! Each noisy client `k` gets a noise level `u_k ~ U(τ, 1)` and a symmetric
//! transition matrix with `1 - u_k` on the diagonal and `u_k / (L - 1)`
//! elsewhere; clean clients keep the identity.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::error::{FedError, Result};
use crate::nn::Matrix;
use crate::rng::{rng_for, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    NonIid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
    /// Probability that a client holds any given class (non-IID only).
    #[serde(default = "one")]
    pub class_prob: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Fraction of clients whose labels are corrupted.
    pub rho: f64,
    /// Lower bound of a noisy client's noise level.
    pub tau: f64,
}

/// Row-stochastic matrix, `T[i][j] = P(noisy = j | true = i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.len();
        if classes < 2 {
            return Err(FedError::config("transition", "need at least 2 classes"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != classes {
                return Err(FedError::config(
                    format!("transition[{i}]"),
                    format!("row has {} entries, expected {classes}", r.len()),
                ));
            }
            if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(FedError::config(
                    format!("transition[{i}]"),
                    "entries must lie in [0, 1]",
                ));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(FedError::config(
                    format!("transition[{i}]"),
                    format!("row sums to {s}"),
                ));
            }
        }
        Ok(TransitionMatrix {
            classes,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn identity(classes: usize) -> Self {
        Self::symmetric(0.0, classes)
    }

    /// `1 - level` on the diagonal, `level / (L - 1)` off it.
    pub fn symmetric(level: f64, classes: usize) -> Self {
        let off = level / (classes - 1) as f64;
        let mut entries = vec![off; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0 - level;
        }
        TransitionMatrix { classes, entries }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.classes..(i + 1) * self.classes]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.classes + j]
    }

    /// Draws a noisy label for true label `y` by inverting the row CDF.
    pub fn sample<R: Rng>(&self, y: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = self.row(y);
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // rounding left u above the accumulated mass: last positive entry
        row.iter().rposition(|&p| p > 0.0).unwrap_or(y)
    }
}

/// Noise assignment for one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientNoise {
    pub level: f64,
    pub transition: TransitionMatrix,
}

impl ClientNoise {
    pub fn is_noisy(&self) -> bool {
        self.level > 0.0
    }
}

/// One client's local data. `true_labels` and `corrupted` are kept for
/// metrics only; training code reads `features` and `noisy_labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub features: Matrix,
    pub noisy_labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub corrupted: Vec<bool>,
    /// Row indices into the dataset this client was carved from.
    pub source_indices: Vec<usize>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    fn from_indices(id: usize, dataset: &RawDataset, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels[i]).collect();
        ClientDataset {
            id,
            features: dataset.features.gather(&indices),
            noisy_labels: labels.clone(),
            corrupted: vec![false; labels.len()],
            true_labels: labels,
            source_indices: indices,
        }
    }
}

fn split_evenly(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

const MAX_MEMBERSHIP_DRAWS: usize = 10_000;

/// Per-client class membership for non-IID splits. Clients that drew no
/// class are redrawn; the whole matrix is redrawn until every class has a
/// holder and every client ends up with at least one sample.
fn draw_membership<R: Rng>(
    rng: &mut R,
    clients: usize,
    class_sizes: &[usize],
    p: f64,
) -> Result<Vec<Vec<bool>>> {
    let classes = class_sizes.len();
    for _ in 0..MAX_MEMBERSHIP_DRAWS {
        let mut holds = Vec::with_capacity(clients);
        for _ in 0..clients {
            loop {
                let row: Vec<bool> = (0..classes).map(|_| rng.gen_bool(p)).collect();
                if row.iter().any(|&h| h) {
                    holds.push(row);
                    break;
                }
            }
        }
        let holders: Vec<usize> = (0..classes)
            .map(|c| holds.iter().filter(|h| h[c]).count())
            .collect();
        let covered = (0..classes).all(|c| class_sizes[c] == 0 || holders[c] > 0);
        // a client only receives samples of class c if the class splits far enough
        let nonempty = holds.iter().all(|h| {
            (0..classes).any(|c| h[c] && class_sizes[c] >= holders[c] && holders[c] > 0)
        });
        if covered && nonempty {
            return Ok(holds);
        }
    }
    Err(FedError::config(
        "partition.class_prob",
        format!("could not draw a class membership covering every class and client with p = {p}"),
    ))
}

/// Splits `dataset` across `spec.clients` clients (labels still clean).
pub fn partition(dataset: &RawDataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientDataset>> {
    let k = spec.clients;
    let n = dataset.len();
    if k == 0 {
        return Err(FedError::config("partition.clients", "must be positive"));
    }
    if k > n {
        return Err(FedError::config(
            "partition.clients",
            format!("{k} clients but only {n} samples"),
        ));
    }
    let mut rng = rng_for(seed, Stream::Partition, &[]);
    let assignments: Vec<Vec<usize>> = match spec.mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            split_evenly(&order, k)
        }
        PartitionMode::NonIid => {
            let p = spec.class_prob;
            if !(p > 0.0 && p <= 1.0) {
                return Err(FedError::config(
                    "partition.class_prob",
                    format!("must lie in (0, 1], got {p}"),
                ));
            }
            let mut by_class = vec![Vec::new(); dataset.classes];
            for (i, &y) in dataset.labels.iter().enumerate() {
                by_class[y].push(i);
            }
            let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
            let holds = draw_membership(&mut rng, k, &sizes, p)?;
            let mut out = vec![Vec::new(); k];
            for (c, members) in by_class.iter_mut().enumerate() {
                let holders: Vec<usize> = (0..k).filter(|&j| holds[j][c]).collect();
                if holders.is_empty() {
                    continue;
                }
                members.shuffle(&mut rng);
                for (j, chunk) in holders.iter().zip(split_evenly(members, holders.len())) {
                    out[*j].extend(chunk);
                }
            }
            out
        }
    };
    Ok(assignments
        .into_iter()
        .enumerate()
        .map(|(id, idx)| ClientDataset::from_indices(id, dataset, idx))
        .collect())
}

/// Picks `round(rho * K)` noisy clients uniformly and draws their levels.
pub fn build_noise(spec: &NoiseSpec, clients: usize, classes: usize, seed: u64) -> Result<Vec<ClientNoise>> {
    if !(0.0..=1.0).contains(&spec.rho) {
        return Err(FedError::config("noise.rho", format!("must lie in [0, 1], got {}", spec.rho)));
    }
    if !(spec.tau >= 0.0 && spec.tau < 1.0) {
        return Err(FedError::config("noise.tau", format!("must lie in [0, 1), got {}", spec.tau)));
    }
    if classes < 2 {
        return Err(FedError::config("noise", "need at least 2 classes"));
    }
    let mut rng = rng_for(seed, Stream::NoiseLevels, &[]);
    let noisy_count = (spec.rho * clients as f64).round() as usize;
    let mut noisy = index::sample(&mut rng, clients, noisy_count).into_vec();
    noisy.sort_unstable();
    let mut out: Vec<ClientNoise> = (0..clients)
        .map(|_| ClientNoise {
            level: 0.0,
            transition: TransitionMatrix::identity(classes),
        })
        .collect();
    for k in noisy {
        let level = rng.gen_range(spec.tau..1.0);
        out[k] = ClientNoise {
            level,
            transition: TransitionMatrix::symmetric(level, classes),
        };
    }
    Ok(out)
}

/// Resamples each label from `T[true label]`; features are left untouched.
pub fn corrupt(client: &ClientDataset, transition: &TransitionMatrix, seed: u64) -> ClientDataset {
    let mut rng = rng_for(seed, Stream::Corruption, &[client.id as u64]);
    let noisy_labels: Vec<usize> = client
        .true_labels
        .iter()
        .map(|&y| transition.sample(y, &mut rng))
        .collect();
    let corrupted = noisy_labels
        .iter()
        .zip(&client.true_labels)
        .map(|(a, b)| a != b)
        .collect();
    ClientDataset {
        noisy_labels,
        corrupted,
        ..client.clone()
    }
}

/// Audit record of the corruption applied to one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientNoiseRecord {
    pub client: usize,
    pub level: f64,
    pub samples: usize,
    pub corrupted: usize,
    pub corrupted_flags: Vec<bool>,
}

pub fn noise_records(clients: &[ClientDataset], noise: &[ClientNoise]) -> Vec<ClientNoiseRecord> {
    clients
        .iter()
        .zip(noise)
        .map(|(c, n)| ClientNoiseRecord {
            client: c.id,
            level: n.level,
            samples: c.len(),
            corrupted: c.corrupted_count(),
            corrupted_flags: c.corrupted.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn labelled(labels: Vec<usize>, classes: usize) -> RawDataset {
        let n = labels.len();
        RawDataset {
            features: Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            labels,
            classes,
            split: Split::Train,
        }
    }

    fn balanced(n: usize, classes: usize) -> RawDataset {
        labelled((0..n).map(|i| i % classes).collect(), classes)
    }

    fn covers_exactly_once(ds: &RawDataset, clients: &[ClientDataset]) {
        let mut seen = vec![0; ds.len()];
        for c in clients {
            assert!(!c.is_empty(), "client {} is empty", c.id);
            for (r, &i) in c.source_indices.iter().enumerate() {
                seen[i] += 1;
                assert_eq!(c.features.row(r), ds.features.row(i));
                assert_eq!(c.true_labels[r], ds.labels[i]);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn iid_partition_is_a_balanced_cover() {
        let ds = balanced(1000, 2);
        let spec = PartitionSpec { mode: PartitionMode::Iid, clients: 2, class_prob: 1.0 };
        for seed in 0..20 {
            let clients = partition(&ds, &spec, seed).unwrap();
            covers_exactly_once(&ds, &clients);
            for c in &clients {
                let ones = c.true_labels.iter().filter(|&&y| y == 1).count() as f64;
                let frac = ones / c.len() as f64;
                assert!((frac - 0.5).abs() < 0.05, "seed {seed}: class-1 share {frac}");
            }
        }
    }

    #[test]
    fn non_iid_full_probability_gives_every_class() {
        let ds = balanced(2000, 10);
        let spec = PartitionSpec { mode: PartitionMode::NonIid, clients: 10, class_prob: 1.0 };
        let clients = partition(&ds, &spec, 3).unwrap();
        covers_exactly_once(&ds, &clients);
        for c in &clients {
            let mut present = vec![false; 10];
            c.true_labels.iter().for_each(|&y| present[y] = true);
            assert!(present.iter().all(|&p| p));
        }
    }

    #[test]
    fn non_iid_mean_classes_per_client_tracks_p() {
        let ds = balanced(5000, 10);
        let spec = PartitionSpec { mode: PartitionMode::NonIid, clients: 20, class_prob: 0.3 };
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..100 {
            let clients = partition(&ds, &spec, seed).unwrap();
            covers_exactly_once(&ds, &clients);
            for c in &clients {
                let mut present = vec![false; 10];
                c.true_labels.iter().for_each(|&y| present[y] = true);
                total += present.iter().filter(|&&p| p).count() as f64;
                count += 1.0;
            }
        }
        // Bernoulli(0.3) over 10 classes conditioned on >= 1 class: 3 / (1 - 0.7^10) ≈ 3.09
        let mean = total / count;
        assert!((mean - 3.0).abs() < 0.5, "mean classes per client {mean}");
    }

    #[test]
    fn partition_errors() {
        let ds = balanced(10, 2);
        let too_many = PartitionSpec { mode: PartitionMode::Iid, clients: 11, class_prob: 1.0 };
        assert!(partition(&ds, &too_many, 0).is_err());
        let zero_p = PartitionSpec { mode: PartitionMode::NonIid, clients: 2, class_prob: 0.0 };
        assert!(partition(&ds, &zero_p, 0).is_err());
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = balanced(500, 5);
        let spec = PartitionSpec { mode: PartitionMode::NonIid, clients: 7, class_prob: 0.5 };
        assert_eq!(partition(&ds, &spec, 9).unwrap(), partition(&ds, &spec, 9).unwrap());
    }

    #[test]
    fn noise_construction() {
        let clean = build_noise(&NoiseSpec { rho: 0.0, tau: 0.3 }, 10, 4, 1).unwrap();
        assert!(clean.iter().all(|c| c.transition == TransitionMatrix::identity(4) && !c.is_noisy()));

        let half = build_noise(&NoiseSpec { rho: 0.5, tau: 0.3 }, 100, 10, 1).unwrap();
        assert_eq!(half.iter().filter(|c| c.is_noisy()).count(), 50);
        for c in half.iter().filter(|c| c.is_noisy()) {
            assert!(c.level >= 0.3 && c.level < 1.0);
            for i in 0..10 {
                assert!((c.transition.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        let t = TransitionMatrix::symmetric(0.5, 10);
        assert_eq!(t.get(3, 3), 0.5);
        assert!((t.get(3, 4) - 0.5 / 9.0).abs() < 1e-15);

        assert!(build_noise(&NoiseSpec { rho: 0.5, tau: 1.0 }, 10, 3, 0).is_err());
        assert!(build_noise(&NoiseSpec { rho: 1.5, tau: 0.1 }, 10, 3, 0).is_err());
    }

    #[test]
    fn transition_matrix_validation() {
        assert!(TransitionMatrix::new(vec![vec![0.5, 0.5], vec![0.2, 0.8]]).is_ok());
        assert!(TransitionMatrix::new(vec![vec![0.5, 0.6], vec![0.2, 0.8]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![1.5, -0.5], vec![0.2, 0.8]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![1.0]]).is_err());
    }

    #[test]
    fn identity_corruption_flips_nothing() {
        let ds = balanced(300, 3);
        let spec = PartitionSpec { mode: PartitionMode::Iid, clients: 3, class_prob: 1.0 };
        for c in partition(&ds, &spec, 0).unwrap() {
            let out = corrupt(&c, &TransitionMatrix::identity(3), 5);
            assert_eq!(out.corrupted_count(), 0);
            assert_eq!(out.noisy_labels, c.true_labels);
        }
    }

    #[test]
    fn corrupted_fraction_matches_level() {
        let n = 20_000;
        let ds = labelled(vec![0; n], 4);
        let client = ClientDataset::from_indices(0, &ds, (0..n).collect());
        let u = 1.0 - 1e-3;
        let out = corrupt(&client, &TransitionMatrix::symmetric(u, 4), 8);
        assert_eq!(out.features, client.features);
        let frac = out.corrupted_count() as f64 / n as f64;
        let sigma = (u * (1.0 - u) / n as f64).sqrt();
        assert!((frac - u).abs() < 3.0 * sigma.max(1.0 / n as f64), "fraction {frac}");
    }

    #[test]
    fn empirical_confusion_matches_transition() {
        let n = 100_000;
        let l = 4;
        let ds = balanced(n, l);
        let client = ClientDataset::from_indices(0, &ds, (0..n).collect());
        let t = TransitionMatrix::new(vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.0, 0.5, 0.5, 0.0],
            vec![0.2, 0.2, 0.2, 0.4],
            vec![0.05, 0.05, 0.0, 0.9],
        ])
        .unwrap();
        let out = corrupt(&client, &t, 17);
        let mut counts = vec![vec![0usize; l]; l];
        for (&y, &z) in out.true_labels.iter().zip(&out.noisy_labels) {
            counts[y][z] += 1;
        }
        for i in 0..l {
            let row_total: usize = counts[i].iter().sum();
            for j in 0..l {
                let est = counts[i][j] as f64 / row_total as f64;
                assert!((est - t.get(i, j)).abs() < 0.01, "T[{i}][{j}] {est} vs {}", t.get(i, j));
            }
        }
        for (c, (a, b)) in out.corrupted.iter().zip(out.noisy_labels.iter().zip(&out.true_labels)) {
            assert_eq!(*c, a != b);
        }
    }

    #[test]
    fn noise_levels_follow_uniform_tau_one() {
        let tau = 0.5;
        let k = 1000;
        let noise = build_noise(&NoiseSpec { rho: 1.0, tau }, k, 10, 21).unwrap();
        let mut levels: Vec<f64> = noise.iter().map(|c| c.level).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(levels[0] >= tau);
        // one-sample Kolmogorov–Smirnov against U(tau, 1)
        let d = levels
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x - tau) / (1.0 - tau);
                let lo = cdf - i as f64 / k as f64;
                let hi = (i + 1) as f64 / k as f64 - cdf;
                lo.max(hi)
            })
            .fold(0.0, f64::max);
        let critical = 1.628 / (k as f64).sqrt(); // α = 0.01
        assert!(d < critical, "KS statistic {d} >= {critical}");
    }

    #[test]
    fn corruption_is_deterministic_and_per_client() {
        let ds = balanced(400, 4);
        let spec = PartitionSpec { mode: PartitionMode::Iid, clients: 2, class_prob: 1.0 };
        let clients = partition(&ds, &spec, 0).unwrap();
        let t = TransitionMatrix::symmetric(0.6, 4);
        assert_eq!(corrupt(&clients[0], &t, 3), corrupt(&clients[0], &t, 3));
        assert_ne!(corrupt(&clients[0], &t, 3).noisy_labels, corrupt(&clients[0], &t, 4).noisy_labels);
        let total: usize = clients.iter().map(ClientDataset::len).sum();
        assert_eq!(total, 400);
    }
}
