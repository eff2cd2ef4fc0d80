//! Training loss (cross-entropy plus confidence regularizer) and the
//! low-loss clean-sample selector.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nn::{log_sum_exp, softmax, Architecture, Batch, Matrix, ParamVector};

/// Prior over noisy labels, `probs[i] = #(label i) / N` on one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    probs: Vec<f64>,
}

impl LabelPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(FedError::config("prior", "need at least 2 classes"));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(FedError::config("prior", "entries must be finite and >= 0"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FedError::config(
                "prior",
                format!("entries sum to {sum}, expected 1"),
            ));
        }
        Ok(LabelPrior { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        LabelPrior {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    /// Empirical label histogram normalized by the sample count.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(FedError::config("prior", "no labels to count"));
        }
        let mut counts = vec![0usize; classes];
        for &y in labels {
            if y >= classes {
                return Err(FedError::config(
                    "prior",
                    format!("label {y} outside [0, {classes})"),
                ));
            }
            counts[y] += 1;
        }
        let n = labels.len() as f64;
        LabelPrior::new(counts.into_iter().map(|c| c as f64 / n).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }
}

/// Per-example clean flags: `true` means selected as clean (v = 1).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask(Vec<bool>);

impl SelectionMask {
    pub fn all(n: usize) -> Self {
        SelectionMask(vec![true; n])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        SelectionMask(flags)
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_selected(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    /// Positions whose flag is set.
    pub fn selected(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }
}

/// Cross-entropy of one logits row against every label.
pub fn ce_all_labels(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| lse - z).collect()
}

fn check_cr_args(classes: usize, prior: &LabelPrior, beta: f64) -> Result<()> {
    if !(beta >= 0.0) {
        return Err(FedError::config("beta", format!("must be >= 0, got {beta}")));
    }
    if prior.classes() != classes {
        return Err(FedError::config(
            "prior",
            format!("{} classes in prior, {classes} logits", prior.classes()),
        ));
    }
    Ok(())
}

/// Confidence regularizer: `-beta * Σ_i prior[i] * CE(logits, i)`.
pub fn cr_loss(logits: &[f64], prior: &LabelPrior, beta: f64) -> Result<f64> {
    check_cr_args(logits.len(), prior, beta)?;
    let expected: f64 = ce_all_labels(logits)
        .iter()
        .zip(prior.probs())
        .map(|(ce, p)| p * ce)
        .sum();
    Ok(-beta * expected)
}

/// Confidence-regularizer weight plus an optional probability floor. With
/// `floor > 0` each CE term inside the regularizer becomes `-ln(p_i + floor)`,
/// which keeps the loss bounded below when `beta > 1`. `floor = 0` is the
/// exact regularizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceReg {
    pub beta: f64,
    pub floor: f64,
}

impl ConfidenceReg {
    pub fn exact(beta: f64) -> Self {
        ConfidenceReg { beta, floor: 0.0 }
    }
}

/// [`cr_loss`] with a probability floor.
pub fn cr_loss_floored(logits: &[f64], prior: &LabelPrior, reg: ConfidenceReg) -> Result<f64> {
    if reg.floor == 0.0 {
        return cr_loss(logits, prior, reg.beta);
    }
    check_cr_args(logits.len(), prior, reg.beta)?;
    let expected: f64 = softmax(logits)
        .iter()
        .zip(prior.probs())
        .map(|(p, q)| -q * (p + reg.floor).ln())
        .sum();
    Ok(-reg.beta * expected)
}

/// `CE(logits, label) + cr_loss(logits)`.
pub fn combined_loss(logits: &[f64], label: usize, prior: &LabelPrior, beta: f64) -> Result<f64> {
    if label >= logits.len() {
        return Err(FedError::config(
            "label",
            format!("label {label} outside [0, {})", logits.len()),
        ));
    }
    let ce = log_sum_exp(logits) - logits[label];
    Ok(ce + cr_loss(logits, prior, beta)?)
}

/// Selects example `n` iff `CE(ỹ_n)` is strictly below the mean CE over all
/// labels. `ce_all[n][i]` is the CE of example `n` against label `i`.
pub fn select_clean<R: AsRef<[f64]>>(ce_all: &[R], noisy_labels: &[usize]) -> SelectionMask {
    assert_eq!(ce_all.len(), noisy_labels.len());
    SelectionMask(
        ce_all
            .iter()
            .zip(noisy_labels)
            .map(|(row, &y)| {
                let row = row.as_ref();
                // Σ_i (CE(ỹ) - CE(i)) < 0  <=>  CE(ỹ) < mean_i CE(i); the
                // difference form is exactly zero for tied losses.
                let diff: f64 = row.iter().map(|ce| row[y] - ce).sum();
                diff < 0.0
            })
            .collect(),
    )
}

/// [`select_clean`] applied to raw logits.
pub fn select_clean_from_logits(logits: &Matrix, noisy_labels: &[usize]) -> SelectionMask {
    let ce: Vec<Vec<f64>> = logits.iter_rows().map(ce_all_labels).collect();
    select_clean(&ce, noisy_labels)
}

/// Counts examples whose predicted probability of their label beats a random
/// guess (`p > 1/L`) yet are rejected by [`select_clean`]. Under pure CE this
/// is always zero; it exists to check that guarantee.
pub fn selector_guarantee_check<R: AsRef<[f64]>>(probs: &[R], labels: &[usize]) -> usize {
    probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| {
            let p = p.as_ref();
            p[y] > 1.0 / p.len() as f64
        })
        .filter(|(p, &y)| {
            let ce: Vec<f64> = p.as_ref().iter().map(|q| -q.ln()).collect();
            !select_clean(&[ce], &[y]).flags()[0]
        })
        .count()
}

/// Per-example combined loss and the gradient of its batch mean.
///
/// With softmax `p`, one-hot `e_y` and prior `π`, the logit gradient of
/// `CE(y) - β Σ_i π_i CE(i)` is `(p - e_y) - β (p - π)`.
pub fn loss_and_grad(
    arch: &Architecture,
    params: &ParamVector,
    batch: &Batch,
    prior: &LabelPrior,
    reg: ConfidenceReg,
) -> Result<(Vec<f64>, ParamVector)> {
    let beta = reg.beta;
    check_cr_args(arch.classes, prior, beta)?;
    if !(0.0..1.0).contains(&reg.floor) {
        return Err(FedError::config("local.cr_floor", "must lie in [0, 1)"));
    }
    let pass = arch.forward_pass(params, &batch.features)?;
    let logits = pass.logits();
    let inv_n = 1.0 / batch.len() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut losses = Vec::with_capacity(batch.len());
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = logits.row(i);
        let loss = if reg.floor == 0.0 {
            combined_loss(row, y, prior, beta)?
        } else {
            log_sum_exp(row) - row[y] + cr_loss_floored(row, prior, reg)?
        };
        if !loss.is_finite() {
            return Err(FedError::Numeric(format!(
                "non-finite training loss {loss} on batch row {i}"
            )));
        }
        losses.push(loss);
        let p = softmax(row);
        let d = dlogits.row_mut(i);
        if reg.floor == 0.0 {
            for (c, (pc, pi)) in p.iter().zip(prior.probs()).enumerate() {
                d[c] = ((1.0 - beta) * pc + beta * pi) * inv_n;
            }
        } else {
            // r_i = p_i / (p_i + floor) damps labels whose probability is
            // already below the floor.
            let r: Vec<f64> = p.iter().map(|pc| pc / (pc + reg.floor)).collect();
            let s: f64 = prior.probs().iter().zip(&r).map(|(q, ri)| q * ri).sum();
            for c in 0..p.len() {
                d[c] = (p[c] + beta * (prior.probs()[c] * r[c] - s * p[c])) * inv_n;
            }
        }
        d[y] -= inv_n;
    }
    Ok((losses, pass.backward(&dlogits)))
}
