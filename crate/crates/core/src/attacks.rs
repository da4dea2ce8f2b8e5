//! Watermark removal attacks: fine-tuning, magnitude pruning (with and
//! without retraining), and knowledge distillation. Every attack works on a
//! copy of the victim model; the victim itself is never modified.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::datasets::Split;
use crate::error::{Error, Result};
use crate::losses::{distill_loss_grad, main_task_loss_grad};
use crate::metrics::main_accuracy;
use crate::modelzoo::{build_classifier, clone_network, ClassifierSpec, Network};
use crate::nn::{Optimizer, ParamKind, Sgd};
use crate::pipelines::EpochLog;
use crate::signal::{OutputBatch, SourceTag};

/// Attacker training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// What an attack produced.
pub struct AttackOutcome {
    pub model: Box<dyn Network>,
    pub logs: Vec<EpochLog>,
    /// Fraction of weight entries zeroed, for the pruning attacks.
    pub sparsity: Option<f32>,
}

fn train_plain(
    net: &mut dyn Network,
    train: &Split,
    cfg: &AttackConfig,
    phase: &str,
    mask: Option<&PruneMask>,
    test: &Split,
) -> Result<Vec<EpochLog>> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0f32;
        let mut batches = 0usize;
        for idx in train.batch_indices(cfg.batch_size, cfg.seed, epoch) {
            let (inputs, labels) = train.gather(&idx);
            let scores = net.forward(&inputs, true);
            let batch = OutputBatch::new(scores, SourceTag::Normal)?;
            let (loss, grad) = main_task_loss_grad(&batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss {loss}"),
                });
            }
            net.zero_grad();
            net.backward(&grad);
            opt.step(&mut net.params_mut());
            if let Some(m) = mask {
                m.apply(net)?;
            }
            total += loss;
            batches += 1;
        }
        logs.push(EpochLog {
            phase: phase.to_string(),
            epoch,
            loss: total / batches as f32,
            ce_loss: None,
            kld_loss: None,
            detect_loss: None,
            detector_acc: None,
            main_acc: Some(main_accuracy(net, test)?),
            wm_acc: None,
            reembed_fraction: None,
        });
    }
    Ok(logs)
}

/// Fine-tunes a copy of the victim with plain cross-entropy on the
/// attacker's data.
pub fn finetune_attack(
    victim: &dyn Network,
    train: &Split,
    test: &Split,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let mut model = clone_network(victim)?;
    let logs = train_plain(model.as_mut(), train, cfg, "attack_finetune", None, test)?;
    Ok(AttackOutcome {
        model,
        logs,
        sparsity: None,
    })
}

/// Per-parameter 0/1 masks aligned with the network's parameter list; only
/// weight-kind parameters (conv and linear kernels) carry non-trivial masks.
pub struct PruneMask {
    masks: Vec<Option<ArrayD<f32>>>,
}

impl PruneMask {
    /// Re-zeroes pruned entries; called after every optimizer step during
    /// retraining so updates cannot resurrect pruned weights.
    pub fn apply(&self, net: &mut dyn Network) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != self.masks.len() {
            return Err(Error::invalid("mask/parameter list mismatch"));
        }
        for (p, m) in params.iter_mut().zip(&self.masks) {
            if let Some(m) = m {
                p.value *= m;
            }
        }
        Ok(())
    }

    /// Fraction of maskable (weight) entries that are zeroed.
    pub fn sparsity(&self) -> f32 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for m in self.masks.iter().flatten() {
            zeros += m.iter().filter(|&&v| v == 0.0).count();
            total += m.len();
        }
        if total == 0 {
            return 0.0;
        }
        zeros as f32 / total as f32
    }
}

/// The global magnitude threshold: the value below which the smallest
/// `sparsity` fraction of the given magnitudes falls.
pub fn magnitude_threshold(magnitudes: &mut Vec<f32>, sparsity: f32) -> Result<f32> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid("sparsity must be in [0, 1)"));
    }
    if magnitudes.is_empty() {
        return Err(Error::invalid("no weights to prune"));
    }
    let k = (magnitudes.len() as f64 * sparsity as f64).floor() as usize;
    if k == 0 {
        return Ok(f32::NEG_INFINITY);
    }
    let idx = k - 1;
    magnitudes.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
    Ok(magnitudes[idx])
}

/// Zeroes the globally smallest-magnitude `sparsity` fraction of weight
/// entries across all conv/linear kernels. Biases and normalization
/// parameters are exempt. Returns the pruned copy and the mask.
pub fn prune_model(victim: &dyn Network, sparsity: f32) -> Result<(Box<dyn Network>, PruneMask)> {
    let mut model = clone_network(victim)?;
    let mut magnitudes: Vec<f32> = Vec::new();
    for p in model.params() {
        if p.kind == ParamKind::Weight {
            magnitudes.extend(p.value.iter().map(|v| v.abs()));
        }
    }
    let threshold = magnitude_threshold(&mut magnitudes, sparsity)?;
    let target = (magnitudes.len() as f64 * sparsity as f64).floor() as usize;

    let mut masks = Vec::new();
    let mut pruned = 0usize;
    for p in model.params_mut() {
        if p.kind != ParamKind::Weight {
            masks.push(None);
            continue;
        }
        let mut m = ArrayD::ones(p.value.raw_dim());
        for (v, mv) in p.value.iter_mut().zip(m.iter_mut()) {
            // <= keeps the pruned count near the target; exact ties are
            // resolved by stopping once the quota is met
            if pruned < target && v.abs() <= threshold {
                *v = 0.0;
                *mv = 0.0;
                pruned += 1;
            }
        }
        masks.push(Some(m));
    }
    Ok((model, PruneMask { masks }))
}

/// Pure pruning attack (no retraining).
pub fn prune_attack(victim: &dyn Network, sparsity: f32) -> Result<AttackOutcome> {
    let (model, mask) = prune_model(victim, sparsity)?;
    Ok(AttackOutcome {
        model,
        logs: Vec::new(),
        sparsity: Some(mask.sparsity()),
    })
}

/// Pruning followed by cross-entropy retraining with the mask enforced after
/// every update.
pub fn prune_retrain_attack(
    victim: &dyn Network,
    sparsity: f32,
    train: &Split,
    test: &Split,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let (mut model, mask) = prune_model(victim, sparsity)?;
    let logs = train_plain(
        model.as_mut(),
        train,
        cfg,
        "attack_prune_retrain",
        Some(&mask),
        test,
    )?;
    Ok(AttackOutcome {
        model,
        logs,
        sparsity: Some(mask.sparsity()),
    })
}

/// Knowledge distillation: trains a fresh student against the teacher's
/// soft outputs. The teacher is black-box (forward passes only) and is
/// left untouched.
#[allow(clippy::too_many_arguments)]
pub fn distill_attack(
    teacher: &mut dyn Network,
    student_spec: &ClassifierSpec,
    train: &Split,
    test: &Split,
    cfg: &AttackConfig,
    temperature: f32,
    hard_weight: f32,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&hard_weight) {
        return Err(Error::invalid("hard_weight must be in [0, 1]"));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    if student_spec.num_classes != teacher.spec().num_classes {
        return Err(Error::invalid("student and teacher disagree on class count"));
    }
    let teacher_hash = teacher.param_hash();
    let mut student = build_classifier(student_spec)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0f32;
        let mut batches = 0usize;
        for idx in train.batch_indices(cfg.batch_size, cfg.seed, epoch) {
            let (inputs, labels) = train.gather(&idx);
            let soft_targets =
                OutputBatch::new(teacher.forward(&inputs, false), SourceTag::Normal)?;
            let scores = student.forward(&inputs, true);
            let batch = OutputBatch::new(scores, SourceTag::Normal)?;
            let (ce, ce_grad) = main_task_loss_grad(&batch, &labels)?;
            let (kld, kld_grad) = distill_loss_grad(&soft_targets, &batch, temperature)?;
            let loss = hard_weight * ce + (1.0 - hard_weight) * kld;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss {loss}"),
                });
            }
            let mut grad = ce_grad;
            grad *= hard_weight;
            grad.scaled_add(1.0 - hard_weight, &kld_grad);
            student.zero_grad();
            student.backward(&grad);
            opt.step(&mut student.params_mut());
            total += loss;
            batches += 1;
        }
        logs.push(EpochLog {
            phase: "attack_distill".to_string(),
            epoch,
            loss: total / batches as f32,
            ce_loss: None,
            kld_loss: None,
            detect_loss: None,
            detector_acc: None,
            main_acc: Some(main_accuracy(student.as_mut(), test)?),
            wm_acc: None,
            reembed_fraction: None,
        });
    }
    if teacher.param_hash() != teacher_hash {
        return Err(Error::Training {
            epoch: cfg.epochs,
            message: "teacher model changed during distillation".to_string(),
        });
    }
    Ok(AttackOutcome {
        model: student,
        logs,
        sparsity: None,
    })
}
