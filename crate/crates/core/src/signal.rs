//! Watermark signals and the output-score perturbations they induce.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which model a batch of output scores came from. Drives detector labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceTag {
    Watermarked,
    Normal,
}

/// A batch of raw pre-softmax classifier outputs.
#[derive(Debug, Clone)]
pub struct OutputBatch {
    pub scores: Array2<f32>,
    pub source_tag: SourceTag,
}

impl OutputBatch {
    pub fn new(scores: Array2<f32>, source_tag: SourceTag) -> Result<Self> {
        if scores.ncols() < 2 {
            return Err(Error::invalid("output batch needs at least 2 classes"));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in output batch".into()));
        }
        Ok(OutputBatch { scores, source_tag })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.ncols()
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }
}

/// The watermark signal: a vector over {0, 1, -1} scaled by strength `gamma`,
/// optionally restricted to a subset of classes via `label_filter`.
///
/// `label_filter` maps class index j to signal index k; when present it must
/// be injective and its values must cover exactly `0..values.len()`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WatermarkSignal {
    pub values: Vec<i8>,
    pub gamma: f32,
    pub label_filter: Option<BTreeMap<usize, usize>>,
    pub seed: u64,
}

impl WatermarkSignal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks the alphabet and filter invariants.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.values.iter().any(|&v| !(-1..=1).contains(&v)) {
            return Err(Error::invalid("signal entries must be in {0, 1, -1}"));
        }
        if self.gamma < 0.0 {
            return Err(Error::invalid("gamma must be non-negative"));
        }
        match &self.label_filter {
            Some(filter) => {
                let mut seen = vec![false; self.values.len()];
                for (&class, &k) in filter {
                    if class >= num_classes {
                        return Err(Error::invalid(format!(
                            "label filter key {class} out of range for {num_classes} classes"
                        )));
                    }
                    if k >= self.values.len() || seen[k] {
                        return Err(Error::invalid("label filter must map onto signal indices injectively"));
                    }
                    seen[k] = true;
                }
                if !seen.iter().all(|&s| s) {
                    return Err(Error::invalid("label filter must cover every signal index"));
                }
            }
            None => {
                if self.values.len() != num_classes {
                    return Err(Error::invalid(format!(
                        "signal length {} must equal class count {num_classes} when no filter is set",
                        self.values.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Restricts the signal to the first `values.len()` classes via an
    /// identity mapping; used for wide-label tasks (e.g. 100-class data with
    /// a length-10 signal).
    pub fn with_identity_filter(mut self) -> Self {
        let filter: BTreeMap<usize, usize> = (0..self.values.len()).map(|i| (i, i)).collect();
        self.label_filter = Some(filter);
        self
    }
}

/// Draws a deterministic signal of the given length. Roughly `zero_fraction`
/// of the entries are 0; the rest split evenly between +1 and -1. A constant
/// draw (all entries equal, which a softmax would cancel) is regenerated with
/// an incremented seed, so the result always has two distinct entries.
pub fn generate_signal(length: usize, seed: u64, zero_fraction: f64) -> Result<WatermarkSignal> {
    if length < 2 {
        return Err(Error::invalid("signal length must be at least 2"));
    }
    if !(0.0..1.0).contains(&zero_fraction) {
        return Err(Error::invalid("zero_fraction must be in [0, 1)"));
    }
    let mut draw_seed = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        let values: Vec<i8> = (0..length)
            .map(|_| {
                if rng.gen_bool(zero_fraction) {
                    0
                } else if rng.gen_bool(0.5) {
                    1
                } else {
                    -1
                }
            })
            .collect();
        // a constant signal (all entries equal, including all-zero) shifts
        // every class by the same amount, which softmax cancels out; redraw
        if values.iter().any(|&v| v != values[0]) {
            return Ok(WatermarkSignal {
                values,
                gamma: 1.0,
                label_filter: None,
                seed: draw_seed,
            });
        }
        draw_seed = draw_seed.wrapping_add(1);
    }
}

/// Subtracts `gamma * S` from every row: `out[i][j] = in[i][j] - gamma * S[j]`.
pub fn apply_perturbation(batch: &OutputBatch, signal: &WatermarkSignal) -> Result<OutputBatch> {
    if signal.label_filter.is_some() {
        return Err(Error::invalid(
            "signal has a label filter; use apply_filtered_perturbation",
        ));
    }
    if signal.len() != batch.num_classes() {
        return Err(Error::invalid(format!(
            "signal length {} != num_classes {}",
            signal.len(),
            batch.num_classes()
        )));
    }
    let mut scores = batch.scores.clone();
    for mut row in scores.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= signal.gamma * signal.values[j] as f32;
        }
    }
    Ok(OutputBatch {
        scores,
        source_tag: batch.source_tag,
    })
}

/// The label-filtered variant: only classes in the filter's key set are
/// perturbed, each by its mapped signal entry.
pub fn apply_filtered_perturbation(
    batch: &OutputBatch,
    signal: &WatermarkSignal,
) -> Result<OutputBatch> {
    let filter = signal
        .label_filter
        .as_ref()
        .ok_or_else(|| Error::invalid("signal has no label filter"))?;
    signal.validate(batch.num_classes())?;
    let mut scores = batch.scores.clone();
    for mut row in scores.rows_mut() {
        for (&class, &k) in filter {
            row[class] -= signal.gamma * signal.values[k] as f32;
        }
    }
    Ok(OutputBatch {
        scores,
        source_tag: batch.source_tag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn batch(rows: &[[f32; 3]]) -> OutputBatch {
        let v: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        let flat: Vec<f32> = v.iter().flatten().copied().collect();
        OutputBatch::new(
            Array2::from_shape_vec((rows.len(), 3), flat).unwrap(),
            SourceTag::Watermarked,
        )
        .unwrap()
    }

    fn signal(values: &[i8], gamma: f32) -> WatermarkSignal {
        WatermarkSignal {
            values: values.to_vec(),
            gamma,
            label_filter: None,
            seed: 0,
        }
    }

    #[test]
    fn perturbation_direct_arithmetic() {
        // scores=[[2,1,0]], S=[1,-1,0], gamma=0.5 -> [[1.5, 1.5, 0.0]]
        let b = batch(&[[2.0, 1.0, 0.0]]);
        let out = apply_perturbation(&b, &signal(&[1, -1, 0], 0.5)).unwrap();
        assert_eq!(out.scores, arr2(&[[1.5, 1.5, 0.0]]));
    }

    #[test]
    fn zero_gamma_is_identity() {
        let b = batch(&[[2.0, 1.0, 0.0], [-1.0, 3.5, 0.25]]);
        let out = apply_perturbation(&b, &signal(&[1, -1, 1], 0.0)).unwrap();
        assert_eq!(out.scores, b.scores);
    }

    #[test]
    fn perturbation_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let scores = Array2::from_shape_fn((8, 5), |_| rng.gen_range(-3.0f32..3.0));
        let b = OutputBatch::new(scores.clone(), SourceTag::Watermarked).unwrap();
        let s = generate_signal(5, 9, 0.2).unwrap();
        let s = WatermarkSignal { gamma: 2.0, ..s };
        let out = apply_perturbation(&b, &s).unwrap();
        for i in 0..8 {
            for j in 0..5 {
                let expect = scores[[i, j]] - 2.0 * s.values[j] as f32;
                assert_eq!(out.scores[[i, j]], expect);
            }
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let b = batch(&[[0.0, 0.0, 0.0]]);
        assert!(apply_perturbation(&b, &signal(&[1, -1], 1.0)).is_err());
    }

    #[test]
    fn generate_is_deterministic_and_nonzero() {
        let a = generate_signal(4, 17, 0.0).unwrap();
        let b = generate_signal(4, 17, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| v == 1 || v == -1));

        let near_one = generate_signal(10, 0, 0.999).unwrap();
        assert!(near_one.values.iter().any(|&v| v != 0));
    }

    #[test]
    fn generate_rejects_short_lengths() {
        assert!(generate_signal(1, 0, 0.0).is_err());
    }

    #[test]
    fn distinct_seeds_rarely_collide() {
        // brute-force sampling oracle over 1000 seed pairs
        let mut collisions = 0;
        for s in 0..1000u64 {
            let a = generate_signal(8, s, 0.2).unwrap();
            let b = generate_signal(8, s + 1000, 0.2).unwrap();
            if a.values == b.values {
                collisions += 1;
            }
        }
        // 8 positions over a 3-letter alphabet: collisions should be rare
        assert!(collisions < 20, "too many collisions: {collisions}");
    }

    #[test]
    fn filtered_touches_only_filtered_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = Array2::from_shape_fn((4, 100), |_| rng.gen_range(-2.0f32..2.0));
        let b = OutputBatch::new(scores.clone(), SourceTag::Watermarked).unwrap();
        let s = generate_signal(10, 3, 0.0).unwrap().with_identity_filter();
        let s = WatermarkSignal { gamma: 1.5, ..s };
        let out = apply_filtered_perturbation(&b, &s).unwrap();
        for i in 0..4 {
            for j in 0..100 {
                if j < 10 {
                    let expect = scores[[i, j]] - 1.5 * s.values[j] as f32;
                    assert_eq!(out.scores[[i, j]], expect);
                } else {
                    assert_eq!(out.scores[[i, j]], scores[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn filtered_with_zero_signal_is_identity() {
        let b = batch(&[[1.0, 2.0, 3.0]]);
        let s = WatermarkSignal {
            values: vec![0, 0],
            gamma: 3.0,
            label_filter: Some([(0, 0), (2, 1)].into_iter().collect()),
            seed: 0,
        };
        let out = apply_filtered_perturbation(&b, &s).unwrap();
        assert_eq!(out.scores, b.scores);
    }

    #[test]
    fn full_identity_filter_matches_unfiltered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-2.0f32..2.0));
        let b = OutputBatch::new(scores, SourceTag::Normal).unwrap();
        let s = generate_signal(4, 11, 0.2).unwrap();
        let s = WatermarkSignal { gamma: 0.7, ..s };
        let unfiltered = apply_perturbation(&b, &s).unwrap();
        let filtered = apply_filtered_perturbation(&b, &s.clone().with_identity_filter()).unwrap();
        assert_eq!(unfiltered.scores, filtered.scores);
    }

    #[test]
    fn filter_key_out_of_range_rejected() {
        let b = batch(&[[0.0, 0.0, 0.0]]);
        let s = WatermarkSignal {
            values: vec![1, -1],
            gamma: 1.0,
            label_filter: Some([(0, 0), (7, 1)].into_iter().collect()),
            seed: 0,
        };
        assert!(apply_filtered_perturbation(&b, &s).is_err());
    }
}
