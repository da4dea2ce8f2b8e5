//! Loss functions: temperature-softened KL dissimilarity, cross-entropy main
//! task loss, binary cross-entropy detector loss, and their compositions.
//!
//! Each differentiable loss has a `*_grad` companion returning the analytic
//! gradient w.r.t. the score input; the training loops consume those.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::OutputBatch;

/// Probability clamp applied before any logarithm.
pub const PROB_CLAMP: f32 = 1e-7;

/// Coefficients shared by the embedding pipelines.
///
/// `alpha` multiplies the KL term and is negative by convention: the KL
/// divergence between the watermarked and adversary outputs is pushed up.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f32,
    pub beta: f32,
    pub temperature: f32,
    /// Re-embed threshold in percent.
    pub tau: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: -0.05,
            beta: 1.0,
            temperature: 4.0,
            tau: 85.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(0.0..=100.0).contains(&self.tau) {
            return Err(Error::invalid("tau must be in [0, 100]"));
        }
        if self.beta < 0.0 {
            return Err(Error::invalid("beta must be non-negative"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be finite"));
        }
        Ok(())
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax(scores: &Array2<f32>) -> Array2<f32> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(scores: &Array2<f32>) -> Array2<f32> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max
            + row
                .iter()
                .map(|&v| (v - max).exp())
                .sum::<f32>()
                .ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn check_pair(a: &OutputBatch, b: &OutputBatch) -> Result<()> {
    if a.scores.dim() != b.scores.dim() {
        return Err(Error::invalid("output batch shapes differ"));
    }
    if a.scores.iter().chain(b.scores.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(())
}

/// The watermark dissimilarity loss
/// `T^2 * KL( softmax(o_wm/T) || softmax(o_n/T) )`, batch-mean reduced.
///
/// The adversary side enters only through its (fixed, finite) log
/// probabilities, so the loss is bounded above for a frozen adversary and
/// can safely be maximized via a negative coefficient.
pub fn kld_loss(o_n: &OutputBatch, o_wm: &OutputBatch, temperature: f32) -> Result<f32> {
    Ok(kld_loss_grad(o_n, o_wm, temperature)?.0)
}

/// KL loss plus its gradient w.r.t. `o_wm` (no gradient flows into `o_n`).
pub fn kld_loss_grad(
    o_n: &OutputBatch,
    o_wm: &OutputBatch,
    temperature: f32,
) -> Result<(f32, Array2<f32>)> {
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    check_pair(o_n, o_wm)?;
    let batch = o_n.scores.nrows() as f32;
    let t = temperature;
    let p_log = log_softmax(&o_n.scores.mapv(|v| v / t));
    let q_log = log_softmax(&o_wm.scores.mapv(|v| v / t));
    let q = q_log.mapv(f32::exp);
    // a = log q - log p, per entry; the loss is the q-expectation of a
    let a = &q_log - &p_log;

    let loss = q
        .iter()
        .zip(a.iter())
        .map(|(&qi, &ai)| qi * ai)
        .sum::<f32>()
        * t
        * t
        / batch;

    // d/dz_k sum_j q_j a_j = q_k (a_k - sum_j q_j a_j), with z = o_wm / T
    let mut grad = Array2::zeros(q.raw_dim());
    for ((mut g, qr), ar) in grad
        .rows_mut()
        .into_iter()
        .zip(q.rows())
        .zip(a.rows())
    {
        let s: f32 = qr.iter().zip(ar.iter()).map(|(&qi, &ai)| qi * ai).sum();
        for ((gi, &qi), &ai) in g.iter_mut().zip(qr.iter()).zip(ar.iter()) {
            *gi = qi * (ai - s) * t / batch;
        }
    }
    Ok((loss, grad))
}

/// The distillation loss `T^2 * KL( softmax(teacher/T) || softmax(student/T) )`
/// with its gradient w.r.t. the student scores: the student is pulled toward
/// the teacher's soft distribution.
pub fn distill_loss_grad(
    teacher: &OutputBatch,
    student: &OutputBatch,
    temperature: f32,
) -> Result<(f32, Array2<f32>)> {
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    check_pair(teacher, student)?;
    let batch = teacher.scores.nrows() as f32;
    let t = temperature;
    let p = softmax(&teacher.scores.mapv(|v| v / t));
    let q_log = log_softmax(&student.scores.mapv(|v| v / t));
    let q = q_log.mapv(f32::exp);

    let mut loss = 0.0f32;
    for (pi, qli) in p.iter().zip(q_log.iter()) {
        if *pi > 0.0 {
            loss += pi * (pi.max(PROB_CLAMP).ln() - qli);
        }
    }
    loss = loss * t * t / batch;

    // d/d student of -sum p log q, with z = student / T: (q - p) / T, times T^2 / batch
    let grad = (&q - &p).mapv(|v| v * t / batch);
    Ok((loss, grad))
}

/// Batch-mean cross-entropy of `softmax(scores)` against integer labels.
pub fn main_task_loss(scores: &OutputBatch, labels: &[usize]) -> Result<f32> {
    Ok(main_task_loss_grad(scores, labels)?.0)
}

/// Cross-entropy plus its gradient w.r.t. the scores: `(softmax - onehot)/B`.
pub fn main_task_loss_grad(scores: &OutputBatch, labels: &[usize]) -> Result<(f32, Array2<f32>)> {
    if labels.len() != scores.len() {
        return Err(Error::invalid("labels/scores length mismatch"));
    }
    let classes = scores.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let batch = scores.len() as f32;
    let logp = log_softmax(&scores.scores);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
    }
    loss /= batch;
    let mut grad = logp.mapv(f32::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / batch);
    Ok((loss, grad))
}

/// Batch-mean binary cross-entropy over detector probabilities, clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]` before the logs.
pub fn detector_loss(probs: &Array1<f32>, labels: &Array1<f32>) -> Result<f32> {
    if probs.len() != labels.len() {
        return Err(Error::invalid("probs/labels length mismatch"));
    }
    if probs.is_empty() {
        return Err(Error::invalid("empty detector batch"));
    }
    let mut loss = 0.0;
    for (&p, &y) in probs.iter().zip(labels.iter()) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(loss / probs.len() as f32)
}

/// `L_Model = L_MainTask + alpha * L_KLD`. USP feeds the raw watermark scores
/// to the cross-entropy; the customized scheme feeds the perturbed batch. The
/// KL term always consumes the raw watermark scores against the adversary.
pub fn model_loss(
    scores_for_ce: &OutputBatch,
    labels: &[usize],
    o_wm_raw: &OutputBatch,
    o_n: &OutputBatch,
    cfg: &LossConfig,
) -> Result<f32> {
    let ce = main_task_loss(scores_for_ce, labels)?;
    let kld = kld_loss(o_n, o_wm_raw, cfg.temperature)?;
    Ok(ce + cfg.alpha * kld)
}

/// `L_Total = L_Model + beta * L_Detect`.
pub fn total_loss(model_loss_value: f32, detect_loss_value: f32, beta: f32) -> f32 {
    model_loss_value + beta * detect_loss_value
}

/// The overall fine-tuning loss with the re-embed switch: plain cross-entropy
/// on the raw outputs while the measured watermark accuracy stays strictly
/// above `tau`, otherwise cross-entropy on the perturbed outputs. No KL term
/// in either branch.
pub fn finetune_loss(
    o_wm: &OutputBatch,
    perturbed: &OutputBatch,
    labels: &[usize],
    current_wm_acc: f32,
    tau: f32,
) -> Result<f32> {
    Ok(finetune_loss_grad(o_wm, perturbed, labels, current_wm_acc, tau)?.1)
}

/// Returns (used_reembed_branch, loss, grad w.r.t. the raw scores).
///
/// The perturbation is a constant shift, so the gradient of the re-embed
/// branch w.r.t. the raw scores equals the cross-entropy gradient evaluated
/// at the perturbed scores.
pub fn finetune_loss_grad(
    o_wm: &OutputBatch,
    perturbed: &OutputBatch,
    labels: &[usize],
    current_wm_acc: f32,
    tau: f32,
) -> Result<(bool, f32, Array2<f32>)> {
    if current_wm_acc > tau {
        let (loss, grad) = main_task_loss_grad(o_wm, labels)?;
        Ok((false, loss, grad))
    } else {
        let (loss, grad) = main_task_loss_grad(perturbed, labels)?;
        Ok((true, loss, grad))
    }
}
