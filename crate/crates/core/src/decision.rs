//! Decision margin, cross-entropy and prediction on logit vectors.
//!
//! The margin `L(x) = Z_t - max_{i != t} Z_i` is positive exactly when the
//! true class wins outright. A tie (`L = 0`) lies on the decision boundary and
//! is counted as incorrect wherever robustness is measured.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionOutput {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub margin: f64,
}

impl DecisionOutput {
    pub fn new(logits: Vec<f64>, true_class: usize) -> Result<Self> {
        let margin = margin(&logits, true_class)?;
        Ok(DecisionOutput { predicted: predict(&logits), logits, margin })
    }

    /// Strictly positive margin.
    pub fn is_correct(&self) -> bool {
        self.margin > 0.0
    }
}

fn check(logits: &[f64], true_class: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Shape(format!("need at least two logits, got {}", logits.len())));
    }
    if true_class >= logits.len() {
        return Err(Error::validation("class index", format!("{true_class} out of range for {} classes", logits.len())));
    }
    Ok(())
}

/// Index of the largest logit other than `true_class` (lowest index on ties).
pub fn rival(logits: &[f64], true_class: usize) -> Result<usize> {
    check(logits, true_class)?;
    let mut best: Option<usize> = None;
    for (i, &z) in logits.iter().enumerate() {
        if i != true_class && best.is_none_or(|b| z > logits[b]) {
            best = Some(i);
        }
    }
    Ok(best.expect("at least one rival"))
}

pub fn margin(logits: &[f64], true_class: usize) -> Result<f64> {
    let r = rival(logits, true_class)?;
    Ok(logits[true_class] - logits[r])
}

/// `-ln softmax(logits)[true_class]`, max-shifted.
pub fn cross_entropy(logits: &[f64], true_class: usize) -> Result<f64> {
    check(logits, true_class)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[true_class])
}

/// Argmax with the lowest index winning ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest logit (lowest index on ties).
pub fn least_likely(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z < logits[best] {
            best = i;
        }
    }
    best
}

/// Records the margin on a graph. The rival class is fixed at the current
/// logit values, so the recorded scalar is smooth around this point.
pub fn margin_node(g: &mut Graph, logits: Var, true_class: usize) -> Result<Var> {
    let r = rival(g.value(logits), true_class)?;
    let t = g.gather(logits, vec![true_class])?;
    let o = g.gather(logits, vec![r])?;
    g.sub(t, o)
}

pub fn cross_entropy_node(g: &mut Graph, logits: Var, true_class: usize) -> Result<Var> {
    check(g.value(logits), true_class)?;
    let lse = g.log_sum_exp(logits);
    let t = g.gather(logits, vec![true_class])?;
    g.sub(lse, t)
}
