//! Multinomial logistic regression trained by full-batch gradient descent
//! with step-halving line search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    /// L2 strength on the non-bias weights.
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the gradient max-norm falls to this value.
    pub tol: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub grad_max_norm: f64,
    pub converged: bool,
    pub final_loss: f64,
}

/// Softmax classifier with a `K x (d+1)` weight matrix, bias in the last
/// column.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    weights: Vec<f64>,
    k: usize,
    dim: usize,
    config: LearnerConfig,
    report: Option<FitReport>,
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("features"))
    }
}

impl ClassifierModel {
    pub fn from_weights(weights: Vec<f64>, k: usize, dim: usize, config: LearnerConfig) -> Result<Self> {
        if k < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {k}")));
        }
        if weights.len() != k * (dim + 1) {
            return Err(Error::Dimension {
                expected: k * (dim + 1),
                got: weights.len(),
            });
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(Self {
            weights,
            k,
            dim,
            config,
            report: None,
        })
    }

    pub fn zeros(k: usize, dim: usize, config: LearnerConfig) -> Result<Self> {
        Self::from_weights(vec![0.0; k * (dim + 1)], k, dim, config)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k_classes(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn report(&self) -> Option<&FitReport> {
        self.report.as_ref()
    }

    fn scores_into(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.dim + 1;
        for (c, s) in out.iter_mut().enumerate() {
            let w = &self.weights[c * stride..(c + 1) * stride];
            *s = w[self.dim] + w[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn check_rows(&self, x: &[f64], cols: usize) -> Result<usize> {
        if cols != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: cols,
            });
        }
        if x.len() % self.dim != 0 {
            return Err(Error::Invalid(format!(
                "{} values do not form rows of {}",
                x.len(),
                self.dim
            )));
        }
        Ok(x.len() / self.dim)
    }

    /// Class posteriors for row-major `x` with `cols` columns; one row of
    /// length K per sample.
    pub fn predict_proba(&self, x: &[f64], cols: usize) -> Result<Vec<Vec<f64>>> {
        let n = self.check_rows(x, cols)?;
        let mut out = Vec::with_capacity(n);
        for row in x.chunks_exact(self.dim) {
            let mut p = vec![0.0; self.k];
            self.scores_into(row, &mut p);
            softmax_in_place(&mut p);
            out.push(p);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &[f64], cols: usize) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(x, cols)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }

    /// Mean cross-entropy plus `(l2/2) * ||W_no_bias||^2`, and its gradient
    /// laid out like the weights.
    pub fn loss_and_grad(&self, x: &[f64], cols: usize, y: &[usize]) -> Result<(f64, Vec<f64>)> {
        let n = self.check_rows(x, cols)?;
        if n != y.len() {
            return Err(Error::Dimension {
                expected: n,
                got: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&t| t >= self.k) {
            return Err(Error::Invalid(format!("target {bad} outside [0, {})", self.k)));
        }
        Ok(self.loss_and_grad_unchecked(x, y))
    }

    fn loss_and_grad_unchecked(&self, x: &[f64], y: &[usize]) -> (f64, Vec<f64>) {
        let stride = self.dim + 1;
        let n = y.len().max(1) as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut scores = vec![0.0; self.k];
        let mut loss = 0.0;
        for (row, &t) in x.chunks_exact(self.dim).zip(y) {
            self.scores_into(row, &mut scores);
            let lse = log_sum_exp(&scores);
            loss += lse - scores[t];
            for (c, &s) in scores.iter().enumerate() {
                let coef = ((s - lse).exp() - if c == t { 1.0 } else { 0.0 }) / n;
                let g = &mut grad[c * stride..(c + 1) * stride];
                for (gj, xj) in g[..self.dim].iter_mut().zip(row) {
                    *gj += coef * xj;
                }
                g[self.dim] += coef;
            }
        }
        loss /= n;
        let lambda = self.config.l2;
        let mut penalty = 0.0;
        for c in 0..self.k {
            for j in 0..self.dim {
                let w = self.weights[c * stride + j];
                penalty += w * w;
                grad[c * stride + j] += lambda * w;
            }
        }
        (loss + 0.5 * lambda * penalty, grad)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in v.iter_mut() {
        *s = (*s - m).exp();
        total += *s;
    }
    for s in v.iter_mut() {
        *s /= total;
    }
}

/// Index of the largest entry, first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, g| m.max(g.abs()))
}

/// Fits a `k`-class model on row-major features `x` (`dim` columns) from zero
/// initialization. Classes missing from `y` are allowed.
pub fn fit(x: &[f64], dim: usize, y: &[usize], k: usize, config: LearnerConfig) -> Result<ClassifierModel> {
    check_finite(x)?;
    if y.is_empty() {
        return Err(Error::Invalid("cannot fit on an empty labeled set".into()));
    }
    let mut model = ClassifierModel::zeros(k, dim, config)?;
    let (mut loss, mut grad) = model.loss_and_grad(x, dim, y)?;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut gnorm = max_abs(&grad);
    while iterations < config.max_iters && gnorm > config.tol {
        let mut accepted = None;
        while step > 1e-14 {
            let trial: Vec<f64> = model
                .weights
                .iter()
                .zip(&grad)
                .map(|(w, g)| w - step * g)
                .collect();
            let candidate = ClassifierModel {
                weights: trial,
                ..model.clone()
            };
            let (l, g) = candidate.loss_and_grad_unchecked(x, y);
            if l.is_finite() && l <= loss {
                accepted = Some((candidate, l, g));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, l, g)) = accepted else {
            break;
        };
        assert!(l <= loss, "line search accepted an ascent step");
        model = candidate;
        loss = l;
        grad = g;
        gnorm = max_abs(&grad);
        iterations += 1;
        step *= 2.0;
    }
    model.report = Some(FitReport {
        iterations,
        grad_max_norm: gnorm,
        converged: gnorm <= config.tol,
        final_loss: loss,
    });
    Ok(model)
}
