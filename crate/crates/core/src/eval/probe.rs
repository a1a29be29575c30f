//! One-vs-rest logistic-regression probes on frozen codes.

use super::{EvalError, Result};
use crate::linalg::{self, Matrix};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LEARNING_RATE: f64 = 0.1;

/// Per-class logistic regressions trained jointly by full-batch gradient
/// descent on standardized features. Weights start at zero, so training is
/// fully deterministic.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Matrix,
    bias: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        let (n, dim) = features.shape();
        if n == 0 || labels.len() != n {
            return Err(EvalError::Shape(format!("{n} feature rows, {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(EvalError::Shape(format!("label {l} >= {classes} classes")));
        }
        let mut mean = vec![0.0; dim];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; dim];
        for r in 0..n {
            for ((s, v), m) in scale.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in scale.iter_mut() {
            let sd = (*s / n as f64).sqrt();
            *s = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        }
        let mut probe = Self {
            mean,
            scale,
            weights: Matrix::zeros(dim, classes),
            bias: vec![0.0; classes],
        };
        let x = probe.standardize(features);
        let targets = Matrix::from_fn(n, classes, |r, c| if labels[r] == c { 1.0 } else { 0.0 });
        for _ in 0..PROBE_ITERATIONS {
            let mut g = probe.logits_standardized(&x)?;
            for (v, t) in g.data_mut().iter_mut().zip(targets.data()) {
                *v = (1.0 / (1.0 + (-*v).exp()) - t) / n as f64;
            }
            let gw = linalg::matmul_tn(&x, &g)?;
            probe.weights.axpy(-PROBE_LEARNING_RATE, &gw)?;
            for c in 0..classes {
                let gb: f64 = (0..n).map(|r| g.get(r, c)).sum();
                probe.bias[c] -= PROBE_LEARNING_RATE * gb;
            }
        }
        if !probe.weights.is_finite() || probe.bias.iter().any(|b| !b.is_finite()) {
            return Err(EvalError::Probe("probe weights diverged".into()));
        }
        Ok(probe)
    }

    fn standardize(&self, features: &Matrix) -> Matrix {
        Matrix::from_fn(features.rows(), features.cols(), |r, c| {
            (features.get(r, c) - self.mean[c]) * self.scale[c]
        })
    }

    fn logits_standardized(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = linalg::matmul(x, &self.weights)?;
        let classes = self.bias.len();
        for row in out.data_mut().chunks_exact_mut(classes) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Per-class scores (logits), one row per example.
    pub fn scores(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.len() {
            return Err(EvalError::Shape(format!(
                "probe expects {} features, got {}",
                self.mean.len(),
                features.cols()
            )));
        }
        self.logits_standardized(&self.standardize(features))
    }

    /// Argmax class per example; ties go to the lowest class index.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let s = self.scores(features)?;
        Ok((0..s.rows())
            .map(|r| {
                s.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }
}
