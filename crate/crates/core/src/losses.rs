//! Per-voxel classification losses with analytic logit gradients, and the
//! composition of the total training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassId, ProbabilityVolume, SemanticGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::config("class weights must be positive and finite"));
        }
        Ok(Self(weights))
    }

    pub fn ones(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A scalar loss, its gradient w.r.t. the flat input it was computed on,
/// and how many voxels actually contributed. `support == 0` flags an empty
/// supervision set (loss and gradient are then zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub support: usize,
}

impl LossOutput {
    pub fn zero(len: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; len],
            support: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.support == 0
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Log-softmax with max subtraction. Changing this changes results bit-for-bit.
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

fn check_logits(logits: &[f64], num_classes: usize, rows: usize) -> Result<()> {
    if num_classes == 0 || logits.len() != rows * num_classes {
        return Err(Error::shape(format!(
            "{} logits for {rows} rows of {num_classes} classes",
            logits.len()
        )));
    }
    Ok(())
}

/// Mean over rows of `row_weight * CE(row, target)`, skipping `ignore` targets.
fn weighted_rows(
    logits: &[f64],
    num_classes: usize,
    targets: &[ClassId],
    row_weight: impl Fn(usize, ClassId) -> f64,
    ignore: Option<ClassId>,
) -> Result<LossOutput> {
    check_logits(logits, num_classes, targets.len())?;
    let valid = targets.iter().filter(|&&t| Some(t) != ignore).count();
    if valid == 0 {
        return Ok(LossOutput::zero(logits.len()));
    }
    let scale = 1.0 / valid as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut logp = vec![0.0; num_classes];
    let mut loss = 0.0;
    for (n, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        if t as usize >= num_classes {
            return Err(Error::config(format!("target {t} outside [0, {num_classes})")));
        }
        let w = row_weight(n, t);
        let row = &logits[n * num_classes..(n + 1) * num_classes];
        log_softmax_into(row, &mut logp);
        loss -= w * logp[t as usize];
        let g = &mut grad[n * num_classes..(n + 1) * num_classes];
        for (c, gc) in g.iter_mut().enumerate() {
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            *gc = scale * w * (logp[c].exp() - onehot);
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad,
        support: valid,
    })
}

/// Class-weighted cross-entropy, mean-reduced over non-ignored voxels.
pub fn weighted_ce(
    logits: &[f64],
    num_classes: usize,
    targets: &[ClassId],
    weights: &ClassWeights,
    ignore: Option<ClassId>,
) -> Result<LossOutput> {
    if weights.0.len() != num_classes {
        return Err(Error::shape(format!(
            "{} class weights for {num_classes} classes",
            weights.0.len()
        )));
    }
    weighted_rows(logits, num_classes, targets, |_, t| weights.0[t as usize], ignore)
}

/// Hard voxel mining loss: `(1/N) * sum_n w_n * CE(refined_n, label_n)`.
pub fn hvm_loss(
    logits: &[f64],
    num_classes: usize,
    labels: &[ClassId],
    weights: &[f64],
    ignore: Option<ClassId>,
) -> Result<LossOutput> {
    if weights.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} weights for {} selected voxels",
            weights.len(),
            labels.len()
        )));
    }
    weighted_rows(logits, num_classes, labels, |n, _| weights[n], ignore)
}

/// Extension point for the scene-class affinity terms of the SSC objective.
///
/// Implementations see the coarse prediction and coarse ground truth and
/// return a loss with its gradient w.r.t. the coarse probabilities.
pub trait AffinityTerm: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, coarse: &ProbabilityVolume, gt_coarse: &SemanticGrid) -> Result<LossOutput>;
}

/// Contributes nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoAffinity;

impl AffinityTerm for NoAffinity {
    fn name(&self) -> &'static str {
        "none"
    }

    fn evaluate(&self, coarse: &ProbabilityVolume, _gt: &SemanticGrid) -> Result<LossOutput> {
        Ok(LossOutput::zero(coarse.probs().len()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub wce: f64,
    pub affinity: f64,
    pub s_hvm: f64,
    pub t_hvm: f64,
    pub distill: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GradNorms {
    pub wce: f64,
    pub affinity: f64,
    pub s_hvm: f64,
    pub t_hvm: f64,
    pub distill: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub wce: f64,
    pub affinity: f64,
    pub s_hvm: f64,
    pub t_hvm: f64,
    pub distill: f64,
    pub grad_norms: GradNorms,
}

pub const DEFAULT_DELTA: f64 = 0.1;

/// `total = wce + affinity + s_hvm + delta * t_hvm + distill`.
pub fn compose_total(parts: &LossParts, grad_norms: GradNorms, delta: f64) -> Result<LossReport> {
    for (term, v) in [
        ("wce", parts.wce),
        ("affinity", parts.affinity),
        ("s_hvm", parts.s_hvm),
        ("t_hvm", parts.t_hvm),
        ("distill", parts.distill),
        ("delta", delta),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, step: None });
        }
    }
    Ok(LossReport {
        total: parts.wce + parts.affinity + parts.s_hvm + delta * parts.t_hvm + parts.distill,
        wce: parts.wce,
        affinity: parts.affinity,
        s_hvm: parts.s_hvm,
        t_hvm: parts.t_hvm,
        distill: parts.distill,
        grad_norms,
    })
}
