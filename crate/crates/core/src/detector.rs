//! The binary watermark detector: a 5-layer MLP over classifier output
//! vectors, trained jointly with the watermarked model.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{detector_loss, log_softmax, softmax, PROB_CLAMP};
use crate::nn::{param_hash, Adam, Linear, Optimizer, Param, Relu};
use crate::signal::OutputBatch;

/// Default detector learning rate.
pub const DETECTOR_LR: f32 = 0.008;

/// Negative-side slope of the detector's hidden activations. A small leak
/// lets units recover after the early phase, where both models' outputs are
/// still indistinguishable and the optimum is the constant 1/2 prediction.
pub const DETECTOR_LEAK: f32 = 0.01;

/// How the detector sees classifier outputs: raw scores (USP) or
/// log-softmax-transformed scores (CSP).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Raw,
    LogSoftmax,
}

/// A balanced batch of (possibly transformed) output vectors with 0/1 labels.
/// `wm_rows[i]` is the row in `inputs` holding the i-th watermarked output,
/// so gradients can be routed back to the watermarked model.
#[derive(Debug, Clone)]
pub struct DetectionBatch {
    pub inputs: Array2<f32>,
    pub labels: Array1<f32>,
    pub wm_rows: Vec<usize>,
}

impl DetectionBatch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Applies the detector's input transform to raw scores.
pub fn transform_scores(scores: &Array2<f32>, mode: InputMode) -> Array2<f32> {
    match mode {
        InputMode::Raw => scores.clone(),
        InputMode::LogSoftmax => log_softmax(scores),
    }
}

/// Backpropagates a gradient through the log-softmax transform.
pub fn log_softmax_backward(scores: &Array2<f32>, grad: &Array2<f32>) -> Array2<f32> {
    let sm = softmax(scores);
    let mut out = grad.clone();
    for i in 0..grad.nrows() {
        let row_sum: f32 = grad.row(i).sum();
        for j in 0..grad.ncols() {
            out[[i, j]] -= sm[[i, j]] * row_sum;
        }
    }
    out
}

/// Builds the labeled detector batch from paired model outputs: watermarked
/// rows get label 1, normal rows label 0, and rows are shuffled with a seeded
/// permutation.
pub fn make_detection_batch(
    o_wm: &OutputBatch,
    o_n: &OutputBatch,
    input_mode: InputMode,
    shuffle_seed: u64,
) -> Result<DetectionBatch> {
    if o_wm.num_classes() != o_n.num_classes() {
        return Err(Error::invalid("class-dim mismatch between output batches"));
    }
    if o_wm.is_empty() || o_n.is_empty() {
        return Err(Error::invalid("empty output batch"));
    }
    let n_wm = o_wm.len();
    let n_n = o_n.len();
    let total = n_wm + n_n;
    let classes = o_wm.num_classes();

    let wm_inputs = transform_scores(&o_wm.scores, input_mode);
    let n_inputs = transform_scores(&o_n.scores, input_mode);

    let mut perm: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    perm.shuffle(&mut rng);
    // perm[src] = dst row in the shuffled batch
    let mut inputs = Array2::zeros((total, classes));
    let mut labels = Array1::zeros(total);
    let mut wm_rows = vec![0usize; n_wm];
    for src in 0..total {
        let dst = perm[src];
        if src < n_wm {
            inputs.row_mut(dst).assign(&wm_inputs.row(src));
            labels[dst] = 1.0;
            wm_rows[src] = dst;
        } else {
            inputs.row_mut(dst).assign(&n_inputs.row(src - n_wm));
        }
    }
    Ok(DetectionBatch {
        inputs,
        labels,
        wm_rows,
    })
}

/// The 5-layer MLP detector (4 hidden layers plus a sigmoid output unit).
#[derive(Debug)]
pub struct Detector {
    layers: Vec<Linear>,
    relus: Vec<Relu>,
    pub input_mode: InputMode,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    pub early_stopped: bool,
    optimizer: Adam,
}

/// Default hidden widths for the four hidden layers.
pub const DEFAULT_HIDDEN_WIDTHS: [usize; 4] = [64, 64, 32, 16];

pub fn build_detector(
    num_classes: usize,
    hidden_widths: &[usize],
    input_mode: InputMode,
    seed: u64,
) -> Result<Detector> {
    if num_classes < 2 {
        return Err(Error::invalid("detector needs at least 2 classes"));
    }
    if hidden_widths.len() != 4 {
        return Err(Error::invalid("hidden_widths must have length 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(5);
    let mut prev = num_classes;
    for &w in hidden_widths {
        layers.push(Linear::new(&mut rng, prev, w, true));
        prev = w;
    }
    layers.push(Linear::new(&mut rng, prev, 1, true));
    Ok(Detector {
        layers,
        relus: (0..4).map(|_| Relu::leaky(DETECTOR_LEAK)).collect(),
        input_mode,
        hidden_widths: hidden_widths.to_vec(),
        num_classes,
        seed,
        early_stopped: false,
        optimizer: Adam::new(DETECTOR_LR),
    })
}

impl Detector {
    fn sigmoid(z: &Array1<f32>) -> Array1<f32> {
        z.mapv(|v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Forward pass on already-transformed inputs, caching for backward.
    fn forward_train(&mut self, inputs: &Array2<f32>) -> Array1<f32> {
        let mut x = inputs.clone();
        for i in 0..4 {
            x = self.layers[i].forward(&x, true);
            x = self.relus[i]
                .forward(&x.into_dyn(), true)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
        }
        let z = self.layers[4].forward(&x, true);
        Self::sigmoid(&z.column(0).to_owned())
    }

    /// Gradient-free forward pass on already-transformed inputs.
    fn forward_eval(&self, inputs: &Array2<f32>) -> Array1<f32> {
        let mut x = inputs.clone();
        for i in 0..4 {
            x = self.layers[i].eval(&x);
            x.mapv_inplace(|v| if v > 0.0 { v } else { DETECTOR_LEAK * v });
        }
        let z = self.layers[4].eval(&x);
        Self::sigmoid(&z.column(0).to_owned())
    }

    /// Backward pass from a gradient w.r.t. the pre-sigmoid logits; returns
    /// the gradient w.r.t. the (transformed) inputs.
    fn backward(&mut self, grad_logits: &Array1<f32>) -> Array2<f32> {
        let g = grad_logits
            .view()
            .insert_axis(ndarray::Axis(1))
            .to_owned();
        let mut g = self.layers[4].backward(&g);
        for i in (0..4).rev() {
            g = self.relus[i]
                .backward(&g.into_dyn())
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            g = self.layers[i].backward(&g);
        }
        g
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_hash(&self) -> u64 {
        param_hash(self.params())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.optimizer.set_lr(lr);
    }

    pub fn lr(&self) -> f32 {
        self.optimizer.lr()
    }

    fn check_dim(&self, width: usize) -> Result<()> {
        if width != self.num_classes {
            return Err(Error::invalid(format!(
                "detector expects {}-dim inputs, got {width}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// One parameter update on a single detection batch. Returns the batch
    /// BCE loss. Does nothing (returns the current loss) while early-stopped.
    pub fn train_batch(&mut self, batch: &DetectionBatch) -> Result<f32> {
        self.check_dim(batch.inputs.ncols())?;
        if self.early_stopped {
            let probs = self.forward_eval(&batch.inputs);
            return detector_loss(&probs, &batch.labels);
        }
        self.zero_grad();
        let probs = self.forward_train(&batch.inputs);
        let loss = detector_loss(&probs, &batch.labels)?;
        let n = probs.len() as f32;
        // BCE through the sigmoid: dL/dz = (p - y) / n
        let grad_logits = (&probs - &batch.labels).mapv(|v| v / n);
        let _ = self.backward(&grad_logits);
        let mut params: Vec<&mut Param> =
            self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        self.optimizer.step(&mut params);
        Ok(loss)
    }

    /// Trains over one epoch of batches. Parameter updates are applied per
    /// batch unless early-stopped; the returned value is the epoch training
    /// accuracy in percent. Reaching 100 sets the early stop; dropping below
    /// 100 on a later epoch re-arms training.
    pub fn train_epoch(&mut self, batches: &[DetectionBatch]) -> Result<f32> {
        if batches.is_empty() {
            return Err(Error::invalid("empty detection batch stream"));
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for batch in batches {
            self.check_dim(batch.inputs.ncols())?;
            if !self.early_stopped {
                self.train_batch(batch)?;
            }
            let probs = self.forward_eval(&batch.inputs);
            for (&p, &y) in probs.iter().zip(batch.labels.iter()) {
                let decided = p > 0.5;
                if decided == (y > 0.5) {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = 100.0 * correct as f32 / total as f32;
        self.early_stopped = acc >= 100.0;
        Ok(acc)
    }

    /// BCE loss of the frozen detector on a batch plus the gradient w.r.t.
    /// the batch inputs; used by the model step of the embedding pipelines.
    /// Detector parameters are left untouched (gradients are cleared).
    pub fn loss_and_input_grad(&mut self, batch: &DetectionBatch) -> Result<(f32, Array2<f32>)> {
        self.check_dim(batch.inputs.ncols())?;
        self.zero_grad();
        let probs = self.forward_train(&batch.inputs);
        let loss = detector_loss(&probs, &batch.labels)?;
        let n = probs.len() as f32;
        let clamped = probs.mapv(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
        let grad_logits = (&clamped - &batch.labels).mapv(|v| v / n);
        let input_grad = self.backward(&grad_logits);
        self.zero_grad();
        Ok((loss, input_grad))
    }

    /// Scores raw classifier outputs: applies the input transform, returns
    /// per-row watermark probabilities and the binary decisions at 0.5.
    pub fn detect(&self, outputs: &OutputBatch) -> Result<(Array1<f32>, Vec<bool>)> {
        self.check_dim(outputs.num_classes())?;
        let inputs = transform_scores(&outputs.scores, self.input_mode);
        let probs = self.forward_eval(&inputs);
        let decisions = probs.iter().map(|&p| p > 0.5).collect();
        Ok((probs, decisions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SourceTag;
    use ndarray::arr2;
    use rand::Rng;

    fn ob(scores: Array2<f32>, tag: SourceTag) -> OutputBatch {
        OutputBatch::new(scores, tag).unwrap()
    }

    fn separable_batches(n: usize, seed: u64) -> Vec<DetectionBatch> {
        // wm outputs shifted by +3 on class 0: trivially separable
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let wm = Array2::from_shape_fn((16, 4), |(_, j)| {
                    rng.gen_range(-1.0f32..1.0) + if j == 0 { 3.0 } else { 0.0 }
                });
                let nn = Array2::from_shape_fn((16, 4), |_| rng.gen_range(-1.0f32..1.0));
                make_detection_batch(
                    &ob(wm, SourceTag::Watermarked),
                    &ob(nn, SourceTag::Normal),
                    InputMode::Raw,
                    seed + i as u64,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_detector(10, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 1).unwrap();
        let b = build_detector(10, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 1).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert!(!a.early_stopped);
        // 100-class case (CIFAR-100 shape): detector sees all 100 outputs
        let wide = build_detector(100, &DEFAULT_HIDDEN_WIDTHS, InputMode::LogSoftmax, 2).unwrap();
        assert_eq!(wide.num_classes, 100);
    }

    #[test]
    fn wrong_hidden_width_count_rejected() {
        assert!(build_detector(10, &[64, 32], InputMode::Raw, 0).is_err());
    }

    #[test]
    fn detection_batch_is_balanced_and_labeled() {
        let wm = ob(Array2::ones((8, 3)), SourceTag::Watermarked);
        let nn = ob(Array2::zeros((8, 3)), SourceTag::Normal);
        let b = make_detection_batch(&wm, &nn, InputMode::Raw, 0).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b.labels.sum(), 8.0);
        for &row in &b.wm_rows {
            assert_eq!(b.labels[row], 1.0);
            assert_eq!(b.inputs.row(row).to_vec(), vec![1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn log_softmax_mode_uniform_row() {
        let wm = ob(arr2(&[[0.0f32, 0.0]]), SourceTag::Watermarked);
        let nn = ob(arr2(&[[0.0f32, 0.0]]), SourceTag::Normal);
        let b = make_detection_batch(&wm, &nn, InputMode::LogSoftmax, 0).unwrap();
        let expect = -(2.0f32).ln();
        for v in b.inputs.iter() {
            assert!((v - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn raw_mode_is_identity() {
        let scores = arr2(&[[1.5f32, -0.25, 3.0]]);
        let wm = ob(scores.clone(), SourceTag::Watermarked);
        let nn = ob(scores.clone(), SourceTag::Normal);
        let b = make_detection_batch(&wm, &nn, InputMode::Raw, 3).unwrap();
        assert_eq!(b.inputs.row(b.wm_rows[0]).to_vec(), scores.row(0).to_vec());
    }

    #[test]
    fn log_softmax_rows_renormalize() {
        let scores = arr2(&[[2.0f32, -1.0, 0.5], [0.0, 0.0, 0.0]]);
        let t = transform_scores(&scores, InputMode::LogSoftmax);
        for row in t.rows() {
            let s: f32 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn separable_data_reaches_100_and_freezes() {
        let mut det = build_detector(4, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 0).unwrap();
        let batches = separable_batches(8, 7);
        let mut reached = false;
        for _ in 0..10 {
            let acc = det.train_epoch(&batches).unwrap();
            if acc >= 100.0 {
                reached = true;
                break;
            }
        }
        assert!(reached, "never reached 100% on separable blobs");
        assert!(det.early_stopped);
        let h0 = det.param_hash();
        let acc = det.train_epoch(&batches).unwrap();
        assert_eq!(det.param_hash(), h0, "parameters changed while early-stopped");
        assert!(acc >= 100.0);
    }

    #[test]
    fn identical_distributions_stay_near_chance() {
        let mut det = build_detector(4, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let batches: Vec<DetectionBatch> = (0..20)
            .map(|i| {
                let wm = Array2::from_shape_fn((32, 4), |_| rng.gen_range(-1.0f32..1.0));
                let nn = Array2::from_shape_fn((32, 4), |_| rng.gen_range(-1.0f32..1.0));
                make_detection_batch(
                    &ob(wm, SourceTag::Watermarked),
                    &ob(nn, SourceTag::Normal),
                    InputMode::Raw,
                    i,
                )
                .unwrap()
            })
            .collect();
        let mut last = 0.0;
        for _ in 0..5 {
            last = det.train_epoch(&batches).unwrap();
        }
        assert!(
            (45.0..=62.0).contains(&last),
            "accuracy {last} too far from chance on identical distributions"
        );
    }

    #[test]
    fn single_update_decreases_loss() {
        let mut det = build_detector(4, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 2).unwrap();
        det.set_lr(0.001);
        let batch = &separable_batches(1, 21)[0];
        let before = {
            let probs = det.forward_eval(&batch.inputs);
            detector_loss(&probs, &batch.labels).unwrap()
        };
        det.train_batch(batch).unwrap();
        let after = {
            let probs = det.forward_eval(&batch.inputs);
            detector_loss(&probs, &batch.labels).unwrap()
        };
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn empty_stream_rejected() {
        let mut det = build_detector(4, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 3).unwrap();
        assert!(det.train_epoch(&[]).is_err());
    }

    #[test]
    fn detect_is_deterministic_and_constant_on_constant_input() {
        let det = build_detector(4, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 4).unwrap();
        let rows = ob(Array2::ones((5, 4)), SourceTag::Normal);
        let (p1, d1) = det.detect(&rows).unwrap();
        let (p2, _) = det.detect(&rows).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|&v| (v - p1[0]).abs() < 1e-7));
        assert_eq!(d1.len(), 5);
    }

    #[test]
    fn untrained_detector_outputs_near_half() {
        // small-uniform init keeps the pre-sigmoid logit close to zero, so an
        // untrained detector should be indifferent rather than confident
        let det = build_detector(6, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let rows = ob(
            Array2::from_shape_fn((1000, 6), |_| rng.gen_range(-2.0f32..2.0)),
            SourceTag::Normal,
        );
        let (probs, decisions) = det.detect(&rows).unwrap();
        assert!(probs.iter().all(|&p| (0.2..=0.8).contains(&p)), "overconfident untrained detector");
        assert_eq!(decisions.len(), 1000);
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let mut det = build_detector(3, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let inputs = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0f32..1.0));
        let labels = Array1::from(vec![1.0f32, 0.0, 1.0, 0.0]);
        let batch = DetectionBatch {
            inputs: inputs.clone(),
            labels: labels.clone(),
            wm_rows: vec![0, 2],
        };
        let (_, grad) = det.loss_and_input_grad(&batch).unwrap();
        let eps = 1e-2f32;
        for i in 0..4 {
            for j in 0..3 {
                let mut up = inputs.clone();
                up[[i, j]] += eps;
                let mut down = inputs.clone();
                down[[i, j]] -= eps;
                let lu = detector_loss(&det.forward_eval(&up), &labels).unwrap();
                let ld = detector_loss(&det.forward_eval(&down), &labels).unwrap();
                let fd = (lu - ld) / (2.0 * eps);
                assert!(
                    (grad[[i, j]] - fd).abs() < 2e-2,
                    "({i},{j}): {} vs {fd}",
                    grad[[i, j]]
                );
            }
        }
    }
}
