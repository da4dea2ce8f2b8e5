//! Verification metrics: task accuracy, watermark accuracy and detection
//! rate, the multi-user customization matrix, and ownership decisions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::Split;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::modelzoo::{count_parameters, Network};
use crate::signal::{OutputBatch, SourceTag};

/// Accuracy threshold (percent) above which the watermark is considered
/// present. Strict: exactly the threshold does not verify.
pub const OWNERSHIP_THRESHOLD: f64 = 85.0;

pub const EVAL_BATCH: usize = 256;

/// Runs the network over a split in evaluation mode and stacks the raw
/// output scores.
pub fn eval_scores(net: &mut dyn Network, split: &Split) -> Array2<f32> {
    let n = split.len();
    let classes = net.spec().num_classes;
    let mut scores = Array2::zeros((n, classes));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (inputs, _) = split.gather(&idx);
        let out = net.forward(&inputs, false);
        scores.slice_mut(ndarray::s![start..end, ..]).assign(&out);
        start = end;
    }
    scores
}

/// Top-1 accuracy in percent.
pub fn accuracy(scores: &Array2<f32>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "scores have {} rows but {} labels given",
            scores.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot compute accuracy of an empty set"));
    }
    let correct = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            pred == y
        })
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Main-task accuracy of a classifier on a split, in percent.
pub fn main_accuracy(net: &mut dyn Network, split: &Split) -> Result<f64> {
    let scores = eval_scores(net, split);
    accuracy(&scores, &split.labels)
}

/// Watermark accuracy in percent over the balanced verification set: every
/// test input contributes one watermarked-model output (expected decision 1)
/// and one reference-model output (expected decision 0), so the set has
/// twice as many rows as the split.
pub fn wm_accuracy(
    detector: &Detector,
    wm_net: &mut dyn Network,
    ref_net: &mut dyn Network,
    split: &Split,
) -> Result<f64> {
    let wm = OutputBatch::new(eval_scores(wm_net, split), SourceTag::Watermarked)?;
    let nm = OutputBatch::new(eval_scores(ref_net, split), SourceTag::Normal)?;
    let (_, wm_dec) = detector.detect(&wm)?;
    let (_, nm_dec) = detector.detect(&nm)?;
    let correct = wm_dec.iter().filter(|&&d| d).count() + nm_dec.iter().filter(|&&d| !d).count();
    Ok(100.0 * correct as f64 / (wm_dec.len() + nm_dec.len()) as f64)
}

/// Fraction (percent) of a model's outputs on the split that the detector
/// flags as watermarked.
pub fn wm_detection_rate(detector: &Detector, net: &mut dyn Network, split: &Split) -> Result<f64> {
    let out = OutputBatch::new(eval_scores(net, split), SourceTag::Watermarked)?;
    let (_, dec) = detector.detect(&out)?;
    if dec.is_empty() {
        return Err(Error::invalid("cannot compute detection rate on an empty split"));
    }
    Ok(100.0 * dec.iter().filter(|&&d| d).count() as f64 / dec.len() as f64)
}

/// Strict ownership decision: the watermark accuracy must exceed the
/// threshold, not merely reach it.
pub fn verify_ownership(wm_acc: f64, threshold: f64) -> bool {
    wm_acc > threshold
}

/// Teacher-to-student parameter ratio for distillation reporting.
pub fn compression_ratio(teacher: &dyn Network, student: &dyn Network) -> f64 {
    count_parameters(teacher) as f64 / count_parameters(student) as f64
}

/// Cross-user verification results: `rates[i][j]` is detector i's detection
/// rate (percent) on model j's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomizationMatrix {
    pub rates: Vec<Vec<f64>>,
}

impl CustomizationMatrix {
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self> {
        let n = rates.len();
        if n == 0 || rates.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("customization matrix must be square and non-empty"));
        }
        Ok(CustomizationMatrix { rates })
    }

    /// Mean detection rate of each detector on its own model.
    pub fn identified(&self) -> f64 {
        let n = self.rates.len();
        (0..n).map(|i| self.rates[i][i]).sum::<f64>() / n as f64
    }

    /// Mean detection rate of each detector on other users' models.
    /// Zero for a single user.
    pub fn misidentified(&self) -> f64 {
        let n = self.rates.len();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.rates[i][j];
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    /// F1 of the claim decisions: cell (i, j) claims ownership when its rate
    /// exceeds the threshold; only the diagonal claims are genuine.
    pub fn f1(&self, threshold: f64) -> f64 {
        let n = self.rates.len();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for i in 0..n {
            for j in 0..n {
                let claim = self.rates[i][j] > threshold;
                match (claim, i == j) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
        }
        if 2 * tp + fp + fneg == 0 {
            return 0.0;
        }
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// Builds the customization matrix for co-trained (detector, model) pairs.
pub fn customization_matrix(
    detectors: &[&Detector],
    models: &mut [Box<dyn Network>],
    split: &Split,
) -> Result<CustomizationMatrix> {
    if detectors.len() != models.len() {
        return Err(Error::invalid("need one detector per model"));
    }
    let outputs: Vec<Array2<f32>> = models
        .iter_mut()
        .map(|m| eval_scores(m.as_mut(), split))
        .collect();
    let mut rates = vec![vec![0.0; models.len()]; detectors.len()];
    for (i, det) in detectors.iter().enumerate() {
        for (j, scores) in outputs.iter().enumerate() {
            let batch = OutputBatch::new(scores.clone(), SourceTag::Watermarked)?;
            let (_, dec) = det.detect(&batch)?;
            rates[i][j] = 100.0 * dec.iter().filter(|&&d| d).count() as f64 / dec.len() as f64;
        }
    }
    CustomizationMatrix::new(rates)
}

/// Mean row-wise L2 distance between two score matrices; used to report how
/// far an attack moved the output distribution.
pub fn mean_output_distance(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("score matrices must have the same shape"));
    }
    if a.nrows() == 0 {
        return Err(Error::invalid("cannot compare empty score matrices"));
    }
    let mut total = 0.0f64;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let d: f32 = ra
            .iter()
            .zip(rb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += (d as f64).sqrt();
    }
    Ok(total / a.nrows() as f64)
}
