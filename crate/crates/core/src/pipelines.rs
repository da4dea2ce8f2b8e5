//! Training pipelines: adversary pretraining, unified (USP) embedding, and
//! customized (CSP) embedding with its overall fine-tuning stage.
//!
//! Both embedding loops co-train the watermarked model and the detector on
//! the same minibatch stream. The adversary model only ever runs forward in
//! evaluation mode; its parameter hash is checked before and after.

use serde::{Deserialize, Serialize};

use crate::datasets::Split;
use crate::detector::{
    build_detector, make_detection_batch, log_softmax_backward, Detector, InputMode,
    DEFAULT_HIDDEN_WIDTHS, DETECTOR_LR,
};
use crate::error::{Error, Result};
use crate::losses::{finetune_loss_grad, kld_loss_grad, main_task_loss_grad, LossConfig};
use crate::metrics::{main_accuracy, wm_accuracy};
use crate::modelzoo::{build_classifier, ClassifierSpec, Network};
use crate::nn::{Optimizer, Sgd};
use crate::signal::{
    apply_filtered_perturbation, apply_perturbation, OutputBatch, SourceTag, WatermarkSignal,
};

/// Hyperparameters shared by pretraining and embedding.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Extra overall fine-tuning epochs (customized scheme only).
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Learning-rate multiplier applied when the overall fine-tuning stage
    /// starts.
    pub finetune_lr_scale: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub loss: LossConfig,
    /// Ablation switches: drop the KL term or the detector coupling.
    pub use_kld: bool,
    pub use_detector: bool,
    pub detector_widths: Vec<usize>,
    pub detector_lr: f32,
    /// Fraction of the training split held out to probe watermark accuracy
    /// during fine-tuning.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            finetune_epochs: 10,
            batch_size: 64,
            lr: 0.01,
            finetune_lr_scale: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossConfig::default(),
            use_kld: true,
            use_detector: true,
            detector_widths: DEFAULT_HIDDEN_WIDTHS.to_vec(),
            detector_lr: DETECTOR_LR,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
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
        if !(0.0 < self.holdout_fraction && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout fraction must be in (0, 1)"));
        }
        if !(self.detector_lr > 0.0 && self.detector_lr.is_finite()) {
            return Err(Error::invalid("detector learning rate must be positive"));
        }
        self.loss.validate()
    }
}

/// One line of the training log; serialized as line-delimited JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kld_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detect_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub main_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wm_acc: Option<f64>,
    /// Fine-tuning only: fraction of batches that took the re-embed branch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reembed_fraction: Option<f64>,
}

/// Everything the embedding pipelines produce.
pub struct EmbedOutcome {
    pub model: Box<dyn Network>,
    pub detector: Detector,
    pub signal: Option<WatermarkSignal>,
    pub logs: Vec<EpochLog>,
}

fn check_split(split: &Split, num_classes: usize, what: &str) -> Result<()> {
    if split.is_empty() {
        return Err(Error::invalid(format!("{what} split is empty")));
    }
    if let Some(&bad) = split.labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!(
            "{what} split has label {bad} but the model has {num_classes} classes"
        )));
    }
    Ok(())
}

/// Trains a classifier from scratch with plain cross-entropy.
pub fn pretrain(
    spec: &ClassifierSpec,
    train: &Split,
    test: &Split,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Box<dyn Network>, Vec<EpochLog>)> {
    cfg.validate()?;
    check_split(train, spec.num_classes, "train")?;
    check_split(test, spec.num_classes, "test")?;
    let mut net = build_classifier(spec)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total_loss = 0.0f32;
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
            total_loss += loss;
            batches += 1;
        }
        let main_acc = main_accuracy(net.as_mut(), test)?;
        let log = EpochLog {
            phase: "pretrain".to_string(),
            epoch,
            loss: total_loss / batches as f32,
            ce_loss: None,
            kld_loss: None,
            detect_loss: None,
            detector_acc: None,
            main_acc: Some(main_acc),
            wm_acc: None,
            reembed_fraction: None,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((net, logs))
}

fn perturb(batch: &OutputBatch, signal: &WatermarkSignal) -> Result<OutputBatch> {
    if signal.label_filter.is_some() {
        apply_filtered_perturbation(batch, signal)
    } else {
        apply_perturbation(batch, signal)
    }
}

/// Extracts the rows of the detector input gradient that belong to the
/// watermarked outputs and, for the log-softmax transform, backpropagates
/// through it. Returns the gradient w.r.t. the raw watermarked scores.
fn route_detector_grad(
    input_grad: &ndarray::Array2<f32>,
    wm_rows: &[usize],
    transform_input: &ndarray::Array2<f32>,
    mode: InputMode,
) -> ndarray::Array2<f32> {
    let classes = input_grad.ncols();
    let mut rows = ndarray::Array2::zeros((wm_rows.len(), classes));
    for (i, &r) in wm_rows.iter().enumerate() {
        rows.row_mut(i).assign(&input_grad.row(r));
    }
    match mode {
        InputMode::Raw => {
            // Remove the per-row mean so the coupling term cannot push the
            // scores along the constant direction a softmax would cancel.
            // The task losses are softmax-invariant, so without this the
            // cheapest detector-pleasing move is a uniform score shift — a
            // mark that evaporates under any output-imitation attack.
            let mut rows = rows;
            for mut r in rows.rows_mut() {
                let mean = r.sum() / classes as f32;
                r.mapv_inplace(|v| v - mean);
            }
            rows
        }
        InputMode::LogSoftmax => log_softmax_backward(transform_input, &rows),
    }
}

struct EmbedStats {
    loss: f32,
    ce: f32,
    kld: f32,
    detect: f32,
    batches: usize,
    det_correct: usize,
    det_total: usize,
    reembed: usize,
}

impl EmbedStats {
    fn new() -> Self {
        EmbedStats {
            loss: 0.0,
            ce: 0.0,
            kld: 0.0,
            detect: 0.0,
            batches: 0,
            det_correct: 0,
            det_total: 0,
            reembed: 0,
        }
    }

    fn detector_acc(&self) -> f64 {
        if self.det_total == 0 {
            return 0.0;
        }
        100.0 * self.det_correct as f64 / self.det_total as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn embed_loop(
    mut wm: Box<dyn Network>,
    adversary: &mut dyn Network,
    signal: Option<&WatermarkSignal>,
    mode: InputMode,
    train: &Split,
    test: &Split,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<EmbedOutcome> {
    cfg.validate()?;
    let num_classes = wm.spec().num_classes;
    if adversary.spec().num_classes != num_classes {
        return Err(Error::invalid(
            "watermarked model and adversary disagree on class count",
        ));
    }
    check_split(train, num_classes, "train")?;
    check_split(test, num_classes, "test")?;
    if let Some(sig) = signal {
        sig.validate(num_classes)?;
    }
    let adversary_hash = adversary.param_hash();

    let mut detector = build_detector(num_classes, &cfg.detector_widths, mode, cfg.seed ^ 0x5eed)?;
    detector.set_lr(cfg.detector_lr);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::new();

    // Held-out slice used to probe watermark accuracy during fine-tuning.
    let (holdout, _) = train.split_off(cfg.holdout_fraction, cfg.seed ^ 0x401d)?;

    let total_epochs = cfg.epochs + if signal.is_some() { cfg.finetune_epochs } else { 0 };
    for epoch in 0..total_epochs {
        let finetuning = epoch >= cfg.epochs;
        if finetuning && epoch == cfg.epochs {
            // Fine-tune gently: a full-rate optimizer saturates the scores
            // within an epoch or two, which buries the embedded offset.
            opt.set_lr(cfg.lr * cfg.finetune_lr_scale);
        }
        let mut stats = EmbedStats::new();

        for (bi, idx) in train
            .batch_indices(cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let (inputs, labels) = train.gather(&idx);
            let o_n = OutputBatch::new(adversary.forward(&inputs, false), SourceTag::Normal)?;
            let o_wm = OutputBatch::new(wm.forward(&inputs, true), SourceTag::Watermarked)?;
            let perturbed = match signal {
                Some(sig) => Some(perturb(&o_wm, sig)?),
                None => None,
            };

            // Detector step on the raw model outputs (what verification sees).
            let shuffle_seed = cfg.seed ^ ((epoch as u64) << 20) ^ bi as u64;
            let db = make_detection_batch(&o_wm, &o_n, mode, shuffle_seed)?;
            if cfg.use_detector {
                detector.train_batch(&db)?;
            }

            // Model step against the (now updated) frozen detector.
            let (mut loss, mut grad);
            if finetuning {
                // The re-embed switch consults the watermark accuracy before
                // every step, so a decaying watermark is caught within one
                // batch. The probe set is the small held-out slice.
                let probe_wm_acc =
                    wm_accuracy(&detector, wm.as_mut(), adversary, &holdout)? as f32;
                let pert = perturbed.as_ref().expect("fine-tuning requires a signal");
                let (reembed, l, g) =
                    finetune_loss_grad(&o_wm, pert, &labels, probe_wm_acc, cfg.loss.tau)?;
                if reembed {
                    stats.reembed += 1;
                }
                loss = l;
                grad = g;
                stats.ce += l;
            } else {
                let ce_batch = perturbed.as_ref().unwrap_or(&o_wm);
                let (ce, ce_grad) = main_task_loss_grad(ce_batch, &labels)?;
                loss = ce;
                grad = ce_grad;
                stats.ce += ce;
                if cfg.use_kld {
                    let (kld, kld_grad) = kld_loss_grad(&o_n, &o_wm, cfg.loss.temperature)?;
                    loss += cfg.loss.alpha * kld;
                    grad.scaled_add(cfg.loss.alpha, &kld_grad);
                    stats.kld += kld;
                }
                if cfg.use_detector {
                    let (dl, input_grad) = detector.loss_and_input_grad(&db)?;
                    let det_grad =
                        route_detector_grad(&input_grad, &db.wm_rows, &o_wm.scores, mode);
                    loss += cfg.loss.beta * dl;
                    grad.scaled_add(cfg.loss.beta, &det_grad);
                    stats.detect += dl;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss {loss}"),
                });
            }
            wm.zero_grad();
            wm.backward(&grad);
            opt.step(&mut wm.params_mut());
            stats.loss += loss;
            stats.batches += 1;

            // Detector training accuracy bookkeeping on this batch.
            let (_, dec_wm) = detector.detect(&o_wm)?;
            let (_, dec_n) = detector.detect(&o_n)?;
            stats.det_correct += dec_wm.iter().filter(|&&d| d).count()
                + dec_n.iter().filter(|&&d| !d).count();
            stats.det_total += dec_wm.len() + dec_n.len();
        }

        // Early stop at perfect training accuracy; re-arm when it slips.
        let det_acc = stats.detector_acc();
        if cfg.use_detector {
            detector.early_stopped = det_acc >= 100.0;
        }

        let n = stats.batches as f32;
        let main_acc = main_accuracy(wm.as_mut(), test)?;
        let wm_acc = wm_accuracy(&detector, wm.as_mut(), adversary, test)?;
        let log = EpochLog {
            phase: if finetuning { "finetune" } else { "embed" }.to_string(),
            epoch,
            loss: stats.loss / n,
            ce_loss: Some(stats.ce / n),
            kld_loss: (!finetuning && cfg.use_kld).then(|| stats.kld / n),
            detect_loss: (!finetuning && cfg.use_detector).then(|| stats.detect / n),
            detector_acc: Some(det_acc),
            main_acc: Some(main_acc),
            wm_acc: Some(wm_acc),
            reembed_fraction: finetuning.then(|| stats.reembed as f64 / stats.batches as f64),
        };
        on_epoch(&log);
        logs.push(log);
    }

    if adversary.param_hash() != adversary_hash {
        return Err(Error::Training {
            epoch: total_epochs,
            message: "adversary model changed during embedding".to_string(),
        });
    }
    Ok(EmbedOutcome {
        model: wm,
        detector,
        signal: signal.cloned(),
        logs,
    })
}

/// Unified soft-label perturbation: co-trains model and detector on raw
/// output scores.
pub fn embed_usp(
    wm: Box<dyn Network>,
    adversary: &mut dyn Network,
    train: &Split,
    test: &Split,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<EmbedOutcome> {
    embed_loop(wm, adversary, None, InputMode::Raw, train, test, cfg, on_epoch)
}

/// Customized soft-label perturbation: the cross-entropy consumes the
/// signal-perturbed outputs, the detector sees log-softmax inputs, and the
/// run ends with the overall fine-tuning stage and its re-embed switch.
pub fn embed_csp(
    wm: Box<dyn Network>,
    adversary: &mut dyn Network,
    signal: &WatermarkSignal,
    train: &Split,
    test: &Split,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<EmbedOutcome> {
    embed_loop(
        wm,
        adversary,
        Some(signal),
        InputMode::LogSoftmax,
        train,
        test,
        cfg,
        on_epoch,
    )
}
