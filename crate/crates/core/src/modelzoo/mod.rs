//! Classifier architectures used as watermark carriers, adversaries, and
//! distillation students.
//!
//! The four named image architectures follow the common CIFAR adaptations;
//! their parameter counts are pinned in tests (11,173,962 / 2,254,090 /
//! 1,268,646 / 272,282 for resnet18 / mobilenet_v2 / shufflenet_v2 /
//! preresnet20 at 10 classes) and a mismatch is treated as a build failure.

mod cnn;
mod mlp;
mod mobilenet;
mod preresnet;
mod resnet;
mod shufflenet;

pub use cnn::CnnSmall;
pub use mlp::MlpSmall;
pub use mobilenet::MobileNetV2;
pub use preresnet::PreResNet20;
pub use resnet::ResNet18;
pub use shufflenet::ShuffleNetV2;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param_hash, Features, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    MlpSmall,
    CnnSmall,
    Resnet18,
    MobilenetV2,
    ShufflenetV2,
    Preresnet20,
}

impl ArchName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp_small" => Ok(ArchName::MlpSmall),
            "cnn_small" => Ok(ArchName::CnnSmall),
            "resnet18" => Ok(ArchName::Resnet18),
            "mobilenet_v2" => Ok(ArchName::MobilenetV2),
            "shufflenet_v2" => Ok(ArchName::ShufflenetV2),
            "preresnet20" => Ok(ArchName::Preresnet20),
            other => Err(Error::invalid(format!("unknown architecture: {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchName::MlpSmall => "mlp_small",
            ArchName::CnnSmall => "cnn_small",
            ArchName::Resnet18 => "resnet18",
            ArchName::MobilenetV2 => "mobilenet_v2",
            ArchName::ShufflenetV2 => "shufflenet_v2",
            ArchName::Preresnet20 => "preresnet20",
        }
    }
}

impl std::fmt::Display for ArchName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What to build: architecture, class count, input width (flat-feature
/// architectures only; image architectures take 3x32x32), and init seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: ArchName,
    pub num_classes: usize,
    /// Input feature dimension for `mlp_small`; ignored by image archs.
    pub input_dim: usize,
    pub seed: u64,
}

impl ClassifierSpec {
    pub fn new(arch: ArchName, num_classes: usize, input_dim: usize, seed: u64) -> Self {
        ClassifierSpec {
            arch,
            num_classes,
            input_dim,
            seed,
        }
    }
}

/// A trainable classifier: forward produces raw pre-softmax scores, backward
/// consumes the gradient w.r.t. those scores and accumulates parameter
/// gradients.
pub trait Network: Send {
    fn forward(&mut self, x: &Features, train: bool) -> Array2<f32>;
    fn backward(&mut self, grad: &Array2<f32>);
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn spec(&self) -> &ClassifierSpec;

    /// Non-trainable state tensors (batch-norm running statistics), in a
    /// deterministic order. Empty for architectures without such state.
    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_hash(&self) -> u64 {
        param_hash(self.params())
    }
}

pub fn build_classifier(spec: &ClassifierSpec) -> Result<Box<dyn Network>> {
    if spec.num_classes < 2 {
        return Err(Error::invalid("classifier needs at least 2 classes"));
    }
    Ok(match spec.arch {
        ArchName::MlpSmall => Box::new(MlpSmall::new(spec)?),
        ArchName::CnnSmall => Box::new(CnnSmall::new(spec)),
        ArchName::Resnet18 => Box::new(ResNet18::new(spec)),
        ArchName::MobilenetV2 => Box::new(MobileNetV2::new(spec)),
        ArchName::ShufflenetV2 => Box::new(ShuffleNetV2::new(spec)),
        ArchName::Preresnet20 => Box::new(PreResNet20::new(spec)),
    })
}

/// Exact count of trainable scalars.
pub fn count_parameters(net: &dyn Network) -> usize {
    net.params().iter().map(|p| p.len()).sum()
}

/// Deep copy of a network: rebuilds the architecture from its spec and
/// copies parameter values and batch-norm statistics.
pub fn clone_network(net: &dyn Network) -> Result<Box<dyn Network>> {
    let mut copy = build_classifier(net.spec())?;
    {
        let src = net.params();
        let mut dst = copy.params_mut();
        debug_assert_eq!(src.len(), dst.len());
        for (d, s) in dst.iter_mut().zip(src) {
            d.value.assign(&s.value);
        }
    }
    {
        let src = net.buffers();
        let mut dst = copy.buffers_mut();
        debug_assert_eq!(src.len(), dst.len());
        for (d, s) in dst.iter_mut().zip(src) {
            d.assign(s);
        }
    }
    Ok(copy)
}
