//! Straight transcription of the dual-model training loop, written per
//! sample with plain vectors. Shares nothing with the engine except the
//! batch order and seed derivation, which are inputs to the procedure.

use fedfixer::client::batch_schedule;
use fedfixer::rng::{derive_seed, Stream};

/// Dense ReLU network, layer sizes `[input, hidden.., classes]`. Parameters
/// per layer: weights indexed `[input][output]`, then biases.
#[derive(Clone, Debug)]
pub struct Net {
    pub sizes: Vec<usize>,
}

impl Net {
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        let mut out = Vec::new();
        for w in self.sizes.windows(2) {
            out.push(at);
            at += w[0] * w[1] + w[1];
        }
        out
    }

    /// Activations of every layer (input first, logits last).
    fn activations(&self, p: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let offs = self.offsets();
        let layers = self.sizes.len() - 1;
        let mut acts = vec![x.to_vec()];
        for l in 0..layers {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let w = &p[offs[l]..offs[l] + ni * no];
            let b = &p[offs[l] + ni * no..offs[l] + ni * no + no];
            let a = &acts[l];
            let mut z = vec![0.0; no];
            for o in 0..no {
                let mut s = b[o];
                for i in 0..ni {
                    s += a[i] * w[i * no + o];
                }
                z[o] = if l + 1 < layers { s.max(0.0) } else { s };
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        self.activations(p, x).pop().unwrap()
    }

    /// Adds `d(⟨dz, logits⟩)/dp` to `grad`.
    fn backprop(&self, p: &[f64], x: &[f64], dz: &[f64], grad: &mut [f64]) {
        let offs = self.offsets();
        let acts = self.activations(p, x);
        let layers = self.sizes.len() - 1;
        let mut delta = dz.to_vec();
        for l in (0..layers).rev() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let a = &acts[l];
            for i in 0..ni {
                for o in 0..no {
                    grad[offs[l] + i * no + o] += a[i] * delta[o];
                }
            }
            for o in 0..no {
                grad[offs[l] + ni * no + o] += delta[o];
            }
            if l > 0 {
                let w = &p[offs[l]..offs[l] + ni * no];
                let mut prev = vec![0.0; ni];
                for i in 0..ni {
                    if a[i] > 0.0 {
                        prev[i] = (0..no).map(|o| w[i * no + o] * delta[o]).sum();
                    }
                }
                delta = prev;
            }
        }
    }
}

fn probs(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Kept if `-ln p(label)` is strictly below the mean of `-ln p(i)` over labels.
fn is_clean(net: &Net, p: &[f64], x: &[f64], label: usize) -> bool {
    let q = probs(&net.logits(p, x));
    let ce: Vec<f64> = q.iter().map(|v| -v.ln()).collect();
    let mean = ce.iter().sum::<f64>() / ce.len() as f64;
    ce[label] - mean < 0.0
}

#[derive(Clone, Copy, Debug)]
pub struct Hyper {
    pub epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    pub eta: f64,
    pub zeta: f64,
    pub beta: f64,
    pub floor: f64,
    pub warmup: usize,
    pub gamma: f64,
}

pub struct Client {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub prior: Vec<f64>,
}

impl Client {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<usize>, classes: usize) -> Self {
        let mut prior = vec![0.0; classes];
        for &l in &y {
            prior[l] += 1.0 / y.len() as f64;
        }
        Client { x, y, prior }
    }
}

/// Gradient of the mean of `CE(y) - β Σ_i prior_i (-ln(p_i + floor))` over
/// the listed rows, through the softmax Jacobian.
fn loss_grad(net: &Net, p: &[f64], c: &Client, rows: &[usize], h: &Hyper) -> Vec<f64> {
    let mut g = vec![0.0; p.len()];
    for &n in rows {
        let q = probs(&net.logits(p, &c.x[n]));
        let l = q.len();
        // dLoss/dq
        let mut dq = vec![0.0; l];
        dq[c.y[n]] -= 1.0 / q[c.y[n]];
        for i in 0..l {
            dq[i] += h.beta * c.prior[i] / (q[i] + h.floor);
        }
        // dq_k/dz_j = q_k (δ_kj − q_j)
        let mut dz = vec![0.0; l];
        for j in 0..l {
            for k in 0..l {
                let jac = q[k] * (if k == j { 1.0 } else { 0.0 } - q[j]);
                dz[j] += dq[k] * jac;
            }
        }
        for v in dz.iter_mut() {
            *v /= rows.len() as f64;
        }
        net.backprop(p, &c.x[n], &dz, &mut g);
    }
    g
}

/// One local update; returns `(n̄, w)`. `split` counts batches where the two
/// models kept different samples.
pub fn client_update(
    net: &Net,
    t: usize,
    c: &Client,
    w_in: &[f64],
    h: &Hyper,
    seed: u64,
    split: &mut usize,
) -> (f64, Vec<f64>) {
    let mut w = w_in.to_vec();
    let mut theta = w.clone();
    let schedule = batch_schedule(c.y.len(), h.batch, h.epochs, seed);
    let mut per_epoch = Vec::new();
    for epoch in &schedule {
        let mut count = 0usize;
        for b in epoch {
            let (bw, bt): (Vec<usize>, Vec<usize>) = if t <= h.warmup {
                (b.clone(), b.clone())
            } else {
                (
                    b.iter().copied().filter(|&n| is_clean(net, &w, &c.x[n], c.y[n])).collect(),
                    b.iter().copied().filter(|&n| is_clean(net, &theta, &c.x[n], c.y[n])).collect(),
                )
            };
            if bw != bt {
                *split += 1;
            }
            // θ ← θ − ζ(∇ℓ(b_w; θ) + λ(θ − w))
            let g = if bw.is_empty() { vec![0.0; w.len()] } else { loss_grad(net, &theta, c, &bw, h) };
            for i in 0..theta.len() {
                theta[i] -= h.zeta * (g[i] + h.lambda * (theta[i] - w[i]));
            }
            // w ← w − ηλ(w − θ)
            for i in 0..w.len() {
                w[i] -= h.eta * h.lambda * (w[i] - theta[i]);
            }
            // w ← w − η∇ℓ(b_θ; w)
            if !bt.is_empty() {
                let g = loss_grad(net, &w, c, &bt, h);
                for i in 0..w.len() {
                    w[i] -= h.eta * g[i];
                }
            }
            count += bt.len();
        }
        per_epoch.push(count as f64);
    }
    let n_bar = per_epoch.iter().sum::<f64>() / per_epoch.len() as f64;
    (n_bar, w)
}

/// Every client participates in every round. Returns the global model after
/// each round and the number of batches on which the selections differed.
pub fn run(net: &Net, clients: &[Client], w0: &[f64], h: &Hyper, rounds: usize, seed: u64) -> (Vec<Vec<f64>>, usize) {
    let mut split = 0;
    let mut w = w0.to_vec();
    let mut out = Vec::new();
    for t in 0..rounds {
        let results: Vec<(f64, Vec<f64>)> = clients
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let s = derive_seed(seed, Stream::ClientUpdate, &[t as u64, k as u64]);
                client_update(net, t, c, &w, h, s, &mut split)
            })
            .collect();
        let total: f64 = results.iter().map(|r| r.0).sum();
        let mut next = vec![0.0; w.len()];
        if total > 0.0 {
            for (nk, wk) in &results {
                for i in 0..w.len() {
                    next[i] += nk / total * wk[i];
                }
            }
            for i in 0..w.len() {
                w[i] = (1.0 - h.gamma) * w[i] + h.gamma * next[i];
            }
        }
        out.push(w.clone());
    }
    (out, split)
}
