//! Test accuracy and label-error detection scores.
//!
//! Detection scores treat "flagged as corrupted" (selector output v = 0) as
//! the positive prediction and an actually corrupted label as the positive
//! class.

use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::error::{FedError, Result};
use crate::losses::SelectionMask;
use crate::nn::{Architecture, ParamVector};

const EVAL_CHUNK: usize = 1024;

/// Fraction of test examples whose argmax prediction matches the label.
pub fn accuracy(arch: &Architecture, params: &ParamVector, test: &RawDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(FedError::config("test", "empty test set"));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = arch.forward(params, &test.features.gather(chunk))?;
        for (row, &i) in logits.iter_rows().zip(chunk) {
            if argmax(row) == test.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub flagged_corrupted: bool,
    pub actually_corrupted: bool,
}

/// Pairs selector flags (`true` = kept as clean) with ground-truth corruption.
pub fn outcomes_from_mask(mask: &SelectionMask, corrupted: &[bool]) -> Vec<DetectionOutcome> {
    assert_eq!(mask.len(), corrupted.len());
    mask.flags()
        .iter()
        .zip(corrupted)
        .map(|(&clean, &bad)| DetectionOutcome {
            flagged_corrupted: !clean,
            actually_corrupted: bad,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Precision, recall and F-score of corrupted-label detection. Precision is
/// 1 when nothing is flagged and recall is 1 when nothing is corrupted.
pub fn detection_scores(outcomes: &[DetectionOutcome]) -> DetectionScores {
    let flagged = outcomes.iter().filter(|o| o.flagged_corrupted).count();
    let corrupted = outcomes.iter().filter(|o| o.actually_corrupted).count();
    let hits = outcomes
        .iter()
        .filter(|o| o.flagged_corrupted && o.actually_corrupted)
        .count();
    let precision = if flagged == 0 {
        1.0
    } else {
        hits as f64 / flagged as f64
    };
    let recall = if corrupted == 0 {
        1.0
    } else {
        hits as f64 / corrupted as f64
    };
    DetectionScores {
        precision,
        recall,
        f_score: f_score(precision, recall),
    }
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Summary of a set of per-client values. `std` is the population standard
/// deviation; quartiles interpolate linearly between order statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(FedError::config("summary", "no values to summarize"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        count: values.len(),
        mean,
        std: var.sqrt(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Distribution of per-client detection F-scores.
pub fn fscore_distribution(scores: &[f64]) -> Result<Summary> {
    summarize(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDetection {
    pub client: usize,
    #[serde(flatten)]
    pub scores: DetectionScores,
}

/// Metrics at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub round: usize,
    pub accuracy: f64,
    pub clients: Vec<ClientDetection>,
    pub f_score_summary: Option<Summary>,
}

impl MetricsReport {
    pub fn new(round: usize, accuracy: f64, clients: Vec<ClientDetection>) -> Result<Self> {
        let f: Vec<f64> = clients.iter().map(|c| c.scores.f_score).collect();
        let f_score_summary = if f.is_empty() {
            None
        } else {
            Some(fscore_distribution(&f)?)
        };
        Ok(MetricsReport {
            round,
            accuracy,
            clients,
            f_score_summary,
        })
    }
}
