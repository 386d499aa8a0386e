//! Row-wise softmax family and the soft-target losses built on it.

use crate::error::{MixcoError, Result};

use super::Tensor;

/// Allowed deviation of a target row sum from 1.
pub const TARGET_SUM_TOLERANCE: f64 = 1e-9;

/// A scalar loss together with its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(MixcoError::domain(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Row-wise `log softmax`, computed as `x - max - log Σ exp(x - max)`.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.expect_matrix("log_softmax")?;
    if c == 0 {
        return Err(MixcoError::contract("log_softmax needs at least one column"));
    }
    check_finite(logits, "logits")?;
    let mut out = logits.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum = row.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
        let log_z = max + sum.ln();
        for v in row.iter_mut() {
            *v -= log_z;
        }
    }
    Ok(out)
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.map(f64::exp))
}

fn check_targets(logits: &Tensor, targets: &Tensor) -> Result<()> {
    logits.check_same_shape(targets, "soft_cross_entropy")?;
    check_finite(targets, "targets")?;
    for (i, row) in targets.row_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| **v < 0.0) {
            return Err(MixcoError::contract(format!(
                "target row {i} has negative entry {v}"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > TARGET_SUM_TOLERANCE {
            return Err(MixcoError::contract(format!(
                "target row {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// `-(1/n) Σ_i Σ_j t_ij · log_softmax(ℓ)_ij` with gradient `(softmax(ℓ) - t) / n`.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<LossGrad> {
    check_targets(logits, targets)?;
    let log_p = log_softmax(logits)?;
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for (t, lp) in targets.data().iter().zip(log_p.data()) {
        if *t != 0.0 {
            total += t * lp;
        }
    }
    let mut grad = log_p;
    for (g, t) in grad.data_mut().iter_mut().zip(targets.data()) {
        *g = (g.exp() - t) * inv_n;
    }
    Ok(LossGrad {
        value: -total * inv_n,
        grad,
    })
}

/// Mean row entropy `-(1/n) Σ_i Σ_j t_ij log t_ij`, with `0 · log 0 = 0`.
pub fn mean_target_entropy(targets: &Tensor) -> f64 {
    let n = targets.rows().max(1);
    let mut h = 0.0;
    for &t in targets.data() {
        if t > 0.0 {
            h -= t * t.ln();
        }
    }
    h / n as f64
}

/// Divergence `KL(t ‖ softmax(ℓ))` averaged over rows.
///
/// Differs from [`soft_cross_entropy`] only by the target entropy, which does
/// not depend on the logits, so the gradient is the same.
pub fn kl_divergence_to_logits(logits: &Tensor, targets: &Tensor) -> Result<LossGrad> {
    let ce = soft_cross_entropy(logits, targets)?;
    Ok(LossGrad {
        value: ce.value - mean_target_entropy(targets),
        grad: ce.grad,
    })
}
