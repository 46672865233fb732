//! Cosine logits for the three classifiers and the training objective.

use crate::adapters::SupportSet;
use crate::error::{Error, Result};
use crate::numerics::{cosine, log_sum_exp, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Softmax temperature of the contrastive term.
    pub tau: f64,
    /// Weight of the global-feature anchor term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            lambda: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Cache-model hyperparameters: `alpha` weighs the cache term, `beta`
/// sharpens the affinities.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TipConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl TipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha >= 0.0
            && self.beta >= 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "tip alpha/beta must be finite and nonnegative, got {}/{}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// `logit_i = cos(w_i, f)`.
pub fn zero_shot_logits(f: &[f64], w: &Matrix) -> Result<Vec<f64>> {
    w.row_iter().map(|wi| cosine(wi, f)).collect()
}

/// Zero-shot logits plus the cache term
/// `alpha * sum_j exp(-beta (1 - cos(F_j, f))) L_{j,i}`.
pub fn tip_adapter_logits(
    f: &[f64],
    w: &Matrix,
    support: &SupportSet,
    cfg: TipConfig,
) -> Result<Vec<f64>> {
    let mut logits = zero_shot_logits(f, w)?;
    if logits.len() != support.n_classes() {
        return Err(Error::DimensionMismatch {
            op: "tip_adapter_logits",
            left: w.shape(),
            right: support.one_hot().shape(),
        });
    }
    let fnorm = norm(f);
    for (row, &label) in support.features().row_iter().zip(support.labels()) {
        // support rows are unit norm
        let affinity = crate::numerics::dot(row, f) / fnorm;
        logits[label] += cfg.alpha * (-cfg.beta * (1.0 - affinity)).exp();
    }
    Ok(logits)
}

/// Cosine logits between a refined image embedding and refined categories.
pub fn adapter_logits(f: &[f64], refined: &Matrix) -> Result<Vec<f64>> {
    zero_shot_logits(f, refined)
}

/// Mean over the batch of `-log softmax(logits / tau)[target]`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize], tau: f64) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let mut total = 0.0;
    let mut scaled = vec![0.0; logits.cols()];
    for (row, &t) in logits.row_iter().zip(targets) {
        if t >= logits.cols() {
            return Err(Error::InvalidTarget {
                index: t,
                classes: logits.cols(),
            });
        }
        for (s, l) in scaled.iter_mut().zip(row) {
            *s = l / tau;
        }
        total += log_sum_exp(&scaled) - scaled[t];
    }
    Ok(total / targets.len().max(1) as f64)
}

/// `||f - g||²`.
pub fn l2_anchor(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::DimensionMismatch {
            op: "l2_anchor",
            left: (1, f.len()),
            right: (1, g.len()),
        });
    }
    Ok(f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn total_loss(ce: f64, l2: f64, cfg: &LossConfig) -> f64 {
    ce + cfg.lambda * l2
}

pub fn argmax(v: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
