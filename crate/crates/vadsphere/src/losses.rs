//! Training objectives: weighted cross-entropy over angular regions,
//! concordance-correlation loss for the three regression dimensions, and the
//! epoch-indexed weighting that combines them.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the differentiated input; the gradients are verified against
//! central finite differences in the tests.

use crate::tensor::Tensor;
use thiserror::Error;

/// Denominator guard used by the concordance correlation coefficient.
pub const CCC_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("class counts are empty")]
    EmptyCounts,
    #[error("all class counts are zero")]
    AllCountsZero,
    #[error("target index {index} out of range for {n_classes} classes")]
    TargetOutOfRange { index: usize, n_classes: usize },
    #[error("expected {expected} targets for batch size {expected}, got {got}")]
    TargetCountMismatch { expected: usize, got: usize },
    #[error("weight vector has {weights} entries but logits have {classes} classes")]
    WeightCountMismatch { weights: usize, classes: usize },
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("expected a [B x {expected}] tensor, got shape {got:?}")]
    BadShape { expected: usize, got: Vec<usize> },
}

/// Per-class weights derived from inverse class frequency, mean-normalized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
    counts: Vec<u64>,
}

impl ClassWeights {
    /// All-ones weights; reduces WCE to plain cross-entropy.
    pub fn uniform(n: usize) -> Self {
        ClassWeights {
            w: vec![1.0; n],
            counts: vec![0; n],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Scalar loss plus its gradient with respect to the differentiated input.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Tensor,
}

/// Epoch-indexed weighting of the auxiliary region loss.
///
/// Enabled, the coefficient decays linearly from 1 and is exactly 0 from
/// `cutoff_epoch` on; disabled, it stays at 1 for the whole run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub decay_slope: f64,
    pub cutoff_epoch: usize,
    pub enabled: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            decay_slope: 0.99 / 5.0,
            cutoff_epoch: 5,
            enabled: true,
        }
    }
}

/// Weights proportional to `1 / max(count, 1)`, rescaled so their mean is 1.
///
/// Empty classes are clamped to a count of 1 so unseen regions neither
/// explode the weight vector nor vanish from it.
pub fn inverse_frequency_weights(counts: &[u64]) -> Result<ClassWeights, LossError> {
    if counts.is_empty() {
        return Err(LossError::EmptyCounts);
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(LossError::AllCountsZero);
    }
    let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / (c.max(1) as f64)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights {
        w: raw.into_iter().map(|x| x / mean).collect(),
        counts: counts.to_vec(),
    })
}

/// Batch-averaged weighted cross-entropy over `[B x N]` logits.
///
/// Per sample the loss is `-w[y] * log softmax(logits)[y]`; the log-sum-exp
/// uses max subtraction. The gradient w.r.t. the logits is
/// `w[y] * (softmax - onehot) / B` per row.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    weights: &ClassWeights,
) -> Result<LossValue, LossError> {
    let (batch, n_classes) = match logits.shape() {
        [b, n] if *b >= 1 && *n >= 1 => (*b, *n),
        other => {
            return Err(LossError::BadShape {
                expected: weights.len(),
                got: other.to_vec(),
            })
        }
    };
    if targets.len() != batch {
        return Err(LossError::TargetCountMismatch {
            expected: batch,
            got: targets.len(),
        });
    }
    if weights.len() != n_classes {
        return Err(LossError::WeightCountMismatch {
            weights: weights.len(),
            classes: n_classes,
        });
    }
    for &t in targets {
        if t >= n_classes {
            return Err(LossError::TargetOutOfRange {
                index: t,
                n_classes,
            });
        }
    }

    let mut value = 0.0;
    let mut grad = Tensor::zeros_like(logits);
    let inv_batch = 1.0 / batch as f64;
    for (s, &target) in targets.iter().enumerate() {
        let row = logits.row2(s);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum_exp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let w = weights.w[target];
        value += w * (log_z - row[target]);

        let grad_row_base = s * n_classes;
        let grad_data = grad.data_mut();
        for j in 0..n_classes {
            let p = (row[j] - log_z).exp();
            let indicator = if j == target { 1.0 } else { 0.0 };
            grad_data[grad_row_base + j] = w * (p - indicator) * inv_batch;
        }
    }
    Ok(LossValue {
        value: value * inv_batch,
        gradient: grad,
    })
}

/// Concordance correlation coefficient with population statistics.
///
/// `2*cov / (var_p + var_t + (mean_p - mean_t)^2 + CCC_EPS)`, in `[-1, 1]`
/// up to the epsilon perturbation.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.len() < 2 {
        return Err(LossError::TooFewSamples {
            needed: 2,
            got: pred.len(),
        });
    }
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = target.iter().sum::<f64>() / n;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    let mut cov = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        var_p += (p - mean_p) * (p - mean_p);
        var_t += (t - mean_t) * (t - mean_t);
        cov += (p - mean_p) * (t - mean_t);
    }
    var_p /= n;
    var_t /= n;
    cov /= n;
    let mean_gap = mean_p - mean_t;
    Ok(2.0 * cov / (var_p + var_t + mean_gap * mean_gap + CCC_EPS))
}

/// Mean over the three dimensions of `1 - CCC`, with the analytic gradient
/// with respect to the predictions. Value lies in `[0, 2]`.
pub fn ccc_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue, LossError> {
    let (batch, dims) = match pred.shape() {
        [b, d] => (*b, *d),
        other => {
            return Err(LossError::BadShape {
                expected: 3,
                got: other.to_vec(),
            })
        }
    };
    if target.shape() != pred.shape() {
        return Err(LossError::BadShape {
            expected: dims,
            got: target.shape().to_vec(),
        });
    }
    if batch < 2 {
        return Err(LossError::TooFewSamples {
            needed: 2,
            got: batch,
        });
    }

    let n = batch as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros_like(pred);
    for dim in 0..dims {
        let mut mean_p = 0.0;
        let mut mean_t = 0.0;
        for s in 0..batch {
            mean_p += pred.get2(s, dim);
            mean_t += target.get2(s, dim);
        }
        mean_p /= n;
        mean_t /= n;

        let mut var_p = 0.0;
        let mut var_t = 0.0;
        let mut cov = 0.0;
        for s in 0..batch {
            let dp = pred.get2(s, dim) - mean_p;
            let dt = target.get2(s, dim) - mean_t;
            var_p += dp * dp;
            var_t += dt * dt;
            cov += dp * dt;
        }
        var_p /= n;
        var_t /= n;
        cov /= n;

        let gap = mean_p - mean_t;
        let denom = var_p + var_t + gap * gap + CCC_EPS;
        let ccc_dim = 2.0 * cov / denom;
        value += 1.0 - ccc_dim;

        // d(1 - CCC)/dp_s, averaged over the `dims` dimensions:
        //   dcov/dp_s   = (t_s - mean_t)/n
        //   ddenom/dp_s = 2*((p_s - mean_p) + gap)/n
        let scale = 1.0 / dims as f64;
        for s in 0..batch {
            let dp = pred.get2(s, dim) - mean_p;
            let dt = target.get2(s, dim) - mean_t;
            let dccc = (2.0 * dt / n) / denom - ccc_dim * (2.0 * (dp + gap) / n) / denom;
            let idx = pred.at2(s, dim);
            grad.data_mut()[idx] = -dccc * scale;
        }
    }
    Ok(LossValue {
        value: value / dims as f64,
        gradient: grad,
    })
}

/// Auxiliary-loss coefficient for the given epoch.
pub fn lambda_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if !cfg.enabled {
        return 1.0;
    }
    if epoch >= cfg.cutoff_epoch {
        0.0
    } else {
        1.0 - cfg.decay_slope * epoch as f64
    }
}

/// Total objective `L = L_ccc + lambda * L_aux` with both gradient blocks.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub lambda: f64,
    pub ccc_value: f64,
    /// Unscaled auxiliary loss; 0 when no auxiliary task runs.
    pub aux_value: f64,
    /// Gradient w.r.t. the regression predictions.
    pub vad_grad: Tensor,
    /// Lambda-scaled gradient w.r.t. the classifier logits; `None` when no
    /// auxiliary task runs (identically zero).
    pub logit_grad: Option<Tensor>,
}

/// Combines the regression loss with an optional auxiliary classification
/// loss under the epoch's schedule coefficient.
///
/// From the cutoff epoch on (schedule enabled) the total equals the
/// regression loss bit-exactly and the auxiliary gradient is exactly zero.
pub fn combined_loss(
    regression: LossValue,
    auxiliary: Option<LossValue>,
    epoch: usize,
    cfg: &ScheduleConfig,
) -> CombinedLoss {
    let lambda = lambda_schedule(epoch, cfg);
    match auxiliary {
        Some(aux) => {
            let mut logit_grad = aux.gradient;
            logit_grad.scale(lambda);
            CombinedLoss {
                value: regression.value + lambda * aux.value,
                lambda,
                ccc_value: regression.value,
                aux_value: aux.value,
                vad_grad: regression.gradient,
                logit_grad: Some(logit_grad),
            }
        }
        None => CombinedLoss {
            value: regression.value,
            lambda,
            ccc_value: regression.value,
            aux_value: 0.0,
            vad_grad: regression.gradient,
            logit_grad: None,
        },
    }
}
