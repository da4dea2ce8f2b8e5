//! Dataset loading: synthetic Gaussian blobs for fast experiments and the
//! CIFAR binary archives for paper-scale runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Features;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Synth5,
    Cifar5,
    Cifar10,
    Cifar10Small,
    Cifar100,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Synth5 => "synth5",
            DatasetName::Cifar5 => "cifar5",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar10Small => "cifar10_small",
            DatasetName::Cifar100 => "cifar100",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetName::Synth5 | DatasetName::Cifar5 => 5,
            DatasetName::Cifar10 | DatasetName::Cifar10Small => 10,
            DatasetName::Cifar100 => 100,
        }
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth5" => Ok(DatasetName::Synth5),
            "cifar5" => Ok(DatasetName::Cifar5),
            "cifar10" => Ok(DatasetName::Cifar10),
            "cifar10_small" => Ok(DatasetName::Cifar10Small),
            "cifar100" => Ok(DatasetName::Cifar100),
            other => Err(Error::invalid(format!(
                "unknown dataset '{other}' (expected one of: synth5, cifar5, cifar10, cifar10_small, cifar100)"
            ))),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One split (train or test): examples plus integer labels.
#[derive(Debug, Clone)]
pub struct Split {
    pub inputs: Features,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materializes the examples at `indices` as a batch.
    pub fn gather(&self, indices: &[usize]) -> (Features, Vec<usize>) {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let inputs = match &self.inputs {
            Features::Flat(x) => {
                let mut out = Array2::zeros((indices.len(), x.ncols()));
                for (row, &i) in indices.iter().enumerate() {
                    out.row_mut(row).assign(&x.row(i));
                }
                Features::Flat(out)
            }
            Features::Image(x) => {
                let (_, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let mut out = Array4::zeros((indices.len(), c, h, w));
                for (row, &i) in indices.iter().enumerate() {
                    out.slice_mut(s![row, .., .., ..])
                        .assign(&x.index_axis(Axis(0), i));
                }
                Features::Image(out)
            }
        };
        (inputs, labels)
    }

    /// Seeded shuffled minibatch index lists covering the split once.
    /// A trailing short batch is kept so every example is visited.
    pub fn batch_indices(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        assert!(batch_size > 0, "batch_size must be positive");
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    /// Class-stratified subset keeping roughly `fraction` of each class,
    /// at least one example per class. Selection order is seeded.
    pub fn stratified_subset(&self, fraction: f64, seed: u64) -> Result<Split> {
        if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::invalid(format!(
                "subset fraction must be in (0, 1], got {fraction}"
            )));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for (_, mut idx) in by_class {
            idx.shuffle(&mut rng);
            let take = ((idx.len() as f64 * fraction).round() as usize).max(1);
            keep.extend_from_slice(&idx[..take.min(idx.len())]);
        }
        keep.sort_unstable();
        let (inputs, labels) = self.gather(&keep);
        Ok(Split { inputs, labels })
    }

    /// Splits off the first `fraction` (seeded shuffle) as a held-out part;
    /// returns (held_out, remainder).
    pub fn split_off(&self, fraction: f64, seed: u64) -> Result<(Split, Split)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::invalid(format!(
                "holdout fraction must be in (0, 1), got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let cut = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let (held, rest) = order.split_at(cut);
        let mut held = held.to_vec();
        let mut rest = rest.to_vec();
        held.sort_unstable();
        rest.sort_unstable();
        let (hi, hl) = self.gather(&held);
        let (ri, rl) = self.gather(&rest);
        Ok((
            Split { inputs: hi, labels: hl },
            Split { inputs: ri, labels: rl },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: DatasetName,
    pub num_classes: usize,
    pub train: Split,
    pub test: Split,
}

/// Gaussian blobs: class k is centered at `separation * e_k` with unit
/// per-coordinate noise, so classes are linearly separable but not trivially
/// so for small separations.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    separation: f32,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("synthetic dataset needs at least 2 classes"));
    }
    if dim < num_classes {
        return Err(Error::invalid(format!(
            "synthetic dataset dim ({dim}) must be at least num_classes ({num_classes})"
        )));
    }
    if train_per_class == 0 || test_per_class == 0 {
        return Err(Error::invalid("per-class example counts must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |per_class: usize, rng: &mut ChaCha8Rng| {
        let n = per_class * num_classes;
        let mut x = Array2::<f32>::zeros((n, dim));
        let mut y = Vec::with_capacity(n);
        for k in 0..num_classes {
            for i in 0..per_class {
                let row = k * per_class + i;
                for j in 0..dim {
                    let noise: f32 = StandardNormal.sample(rng);
                    let center = if j == k { separation } else { 0.0 };
                    x[[row, j]] = center + noise;
                }
                y.push(k);
            }
        }
        Split {
            inputs: Features::Flat(x),
            labels: y,
        }
    };
    let train = sample(train_per_class, &mut rng);
    let test = sample(test_per_class, &mut rng);
    Ok(Dataset {
        name: DatasetName::Synth5,
        num_classes,
        train,
        test,
    })
}

/// The default fast dataset: 5 classes, 32 features, 1000 train + 200 test
/// per class.
pub fn synth5(seed: u64) -> Dataset {
    synth_blobs(5, 32, 1000, 200, 4.0, seed).expect("synth5 parameters are valid")
}

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD_PIXELS: usize = 3072;

fn read_cifar_file(path: &Path, label_bytes: usize) -> Result<(Array4<f32>, Vec<usize>)> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| {
            Error::Resource(format!(
                "missing CIFAR archive {}: {e}. Download the binary-version archive \
                 (cifar-10-binary.tar.gz or cifar-100-binary.tar.gz) from \
                 https://www.cs.toronto.edu/~kriz/cifar.html and extract it under the data directory",
                path.display()
            ))
        })?
        .read_to_end(&mut buf)
        .map_err(Error::Io)?;
    let record = label_bytes + CIFAR_RECORD_PIXELS;
    if buf.is_empty() || buf.len() % record != 0 {
        return Err(Error::Resource(format!(
            "corrupt CIFAR archive {}: {} bytes is not a multiple of the {}-byte record size",
            path.display(),
            buf.len(),
            record
        )));
    }
    let n = buf.len() / record;
    let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &buf[i * record..(i + 1) * record];
        // cifar100 records carry (coarse, fine); the fine label is last.
        labels.push(rec[label_bytes - 1] as usize);
        for c in 0..3 {
            for p in 0..1024 {
                let v = rec[label_bytes + c * 1024 + p] as f32 / 255.0;
                images[[i, c, p / 32, p % 32]] = (v - CIFAR_MEAN[c]) / CIFAR_STD[c];
            }
        }
    }
    Ok((images, labels))
}

fn load_cifar10(data_dir: &Path) -> Result<(Split, Split)> {
    let dir = data_dir.join("cifar-10-batches-bin");
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let (x, y) = read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), 1)?;
        train_images.push(x);
        train_labels.extend(y);
    }
    let views: Vec<_> = train_images.iter().map(|x| x.view()).collect();
    let train_x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
    let (test_x, test_y) = read_cifar_file(&dir.join("test_batch.bin"), 1)?;
    Ok((
        Split {
            inputs: Features::Image(train_x),
            labels: train_labels,
        },
        Split {
            inputs: Features::Image(test_x),
            labels: test_y,
        },
    ))
}

fn load_cifar100(data_dir: &Path) -> Result<(Split, Split)> {
    let dir = data_dir.join("cifar-100-binary");
    let (train_x, train_y) = read_cifar_file(&dir.join("train.bin"), 2)?;
    let (test_x, test_y) = read_cifar_file(&dir.join("test.bin"), 2)?;
    Ok((
        Split {
            inputs: Features::Image(train_x),
            labels: train_y,
        },
        Split {
            inputs: Features::Image(test_x),
            labels: test_y,
        },
    ))
}

fn filter_classes(split: &Split, keep: usize) -> Split {
    let idx: Vec<usize> = split
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y < keep)
        .map(|(i, _)| i)
        .collect();
    let (inputs, labels) = split.gather(&idx);
    Split { inputs, labels }
}

/// Loads a dataset by name. `data_dir` is only consulted for the CIFAR
/// variants; `seed` drives the synthetic generator and subset selection.
pub fn load(name: DatasetName, data_dir: &Path, seed: u64) -> Result<Dataset> {
    match name {
        DatasetName::Synth5 => Ok(synth5(seed)),
        DatasetName::Cifar10 => {
            let (train, test) = load_cifar10(data_dir)?;
            Ok(Dataset {
                name,
                num_classes: 10,
                train,
                test,
            })
        }
        DatasetName::Cifar5 => {
            let (train, test) = load_cifar10(data_dir)?;
            Ok(Dataset {
                name,
                num_classes: 5,
                train: filter_classes(&train, 5),
                test: filter_classes(&test, 5),
            })
        }
        DatasetName::Cifar10Small => {
            let (train, test) = load_cifar10(data_dir)?;
            Ok(Dataset {
                name,
                num_classes: 10,
                train: train.stratified_subset(0.1, seed)?,
                test,
            })
        }
        DatasetName::Cifar100 => {
            let (train, test) = load_cifar100(data_dir)?;
            Ok(Dataset {
                name,
                num_classes: 100,
                train,
                test,
            })
        }
    }
}
