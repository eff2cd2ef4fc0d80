//! Minimal differentiable classifier over a flat parameter vector.
//!
//! A model is described by an [`Architecture`] (optional convolutional stack
//! followed by dense ReLU layers and a linear softmax head) and its weights
//! live in a single [`ParamVector`]. Everything here is pure: the same inputs
//! always produce bitwise-identical outputs.

mod arch;
mod conv;

pub use arch::{Architecture, ConvLayerSpec, ConvStack, ForwardPass};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Flat vector of model parameters. Its length is fixed by the architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    /// Wraps raw values, rejecting non-finite entries.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FedError::Numeric(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(ParamVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Little-endian float64 dump, one value after another.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(FedError::Numeric(format!(
                "parameter dump length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        ParamVector::from_vec(values)
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FedError::config(
                "matrix",
                format!("{} values cannot fill a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(FedError::config(
                    "matrix",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Copies the listed rows into a new matrix.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// Features paired with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(FedError::config(
                "batch",
                format!(
                    "{} feature rows but {} labels",
                    features.rows(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(FedError::config(
                "batch.labels",
                format!("label {bad} outside [0, {classes})"),
            ));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Numerically stable softmax of one logits row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln Σ exp(z)` computed without overflow.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy per example and the gradient of the batch mean.
pub fn ce_loss_and_grad(
    arch: &Architecture,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(Vec<f64>, ParamVector)> {
    let pass = arch.forward_pass(params, &batch.features)?;
    let logits = pass.logits();
    let inv_n = 1.0 / batch.len() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut losses = Vec::with_capacity(batch.len());
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = logits.row(i);
        losses.push(log_sum_exp(row) - row[y]);
        let p = softmax(row);
        let d = dlogits.row_mut(i);
        for (c, pc) in p.into_iter().enumerate() {
            d[c] = pc * inv_n;
        }
        d[y] -= inv_n;
    }
    let grad = pass.backward(&dlogits);
    Ok((losses, grad))
}

/// `params - lr * grad`
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if params.len() != grad.len() {
        return Err(FedError::config(
            "sgd_step",
            format!(
                "parameter length {} differs from gradient length {}",
                params.len(),
                grad.len()
            ),
        ));
    }
    if !(lr > 0.0) {
        return Err(FedError::config(
            "sgd_step.lr",
            format!("learning rate must be positive, got {lr}"),
        ));
    }
    let mut out = params.clone();
    out.axpy(-lr, grad);
    Ok(out)
}
