//! Minimal neural-network layer framework with manual backpropagation.
//!
//! Layers cache whatever they need from the forward pass; `backward` consumes
//! the cached state and returns the gradient w.r.t. the layer input while
//! accumulating parameter gradients in place.

mod batchnorm;
mod conv;
mod linear;
mod optim;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use optim::{Adam, Optimizer, Sgd};

use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What role a parameter tensor plays. Magnitude pruning touches only
/// `Weight` parameters of linear/conv layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// A trainable parameter tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: ArrayD<f32>, kind: ParamKind) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad, kind }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Activations flowing between layers: flat feature vectors or NCHW images.
#[derive(Debug, Clone)]
pub enum Features {
    Flat(Array2<f32>),
    Image(Array4<f32>),
}

impl Features {
    pub fn batch_len(&self) -> usize {
        match self {
            Features::Flat(a) => a.nrows(),
            Features::Image(a) => a.shape()[0],
        }
    }

    pub fn as_flat(&self) -> &Array2<f32> {
        match self {
            Features::Flat(a) => a,
            Features::Image(_) => panic!("expected flat features"),
        }
    }

    pub fn as_image(&self) -> &Array4<f32> {
        match self {
            Features::Image(a) => a,
            Features::Flat(_) => panic!("expected image features"),
        }
    }

    pub fn into_flat(self) -> Array2<f32> {
        match self {
            Features::Flat(a) => a,
            Features::Image(_) => panic!("expected flat features"),
        }
    }

    pub fn into_image(self) -> Array4<f32> {
        match self {
            Features::Image(a) => a,
            Features::Flat(_) => panic!("expected image features"),
        }
    }
}

/// Uniform Kaiming-style init matching the common `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// convention for linear and convolution layers.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = if fan_in > 0 {
        1.0 / (fan_in as f32).sqrt()
    } else {
        0.0
    };
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/data mismatch")
}

/// ReLU with an optional cap (cap = 6.0 gives ReLU6) and an optional
/// negative-side slope (leaky variant).
#[derive(Debug, Clone)]
pub struct Relu {
    cap: Option<f32>,
    slope: f32,
    mask: Option<ArrayD<f32>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { cap: None, slope: 0.0, mask: None }
    }

    pub fn capped(cap: f32) -> Self {
        Relu { cap: Some(cap), slope: 0.0, mask: None }
    }

    pub fn leaky(slope: f32) -> Self {
        Relu { cap: None, slope, mask: None }
    }

    pub fn forward(&mut self, x: &ArrayD<f32>, train: bool) -> ArrayD<f32> {
        let cap = self.cap.unwrap_or(f32::INFINITY);
        let slope = self.slope;
        let out = x.mapv(|v| if v > 0.0 { v.min(cap) } else { slope * v });
        if train {
            let mask = x.mapv(|v| {
                if v > 0.0 && v < cap {
                    1.0
                } else if v <= 0.0 {
                    slope
                } else {
                    0.0
                }
            });
            self.mask = Some(mask);
        }
        out
    }

    pub fn backward(&mut self, grad: &ArrayD<f32>) -> ArrayD<f32> {
        let mask = self.mask.take().expect("relu backward without forward");
        grad * &mask
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

/// Global average pool over the spatial dimensions: [n,c,h,w] -> [n,c].
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    spatial: usize,
    shape: Vec<usize>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array2<f32> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        self.spatial = h * w;
        self.shape = x.shape().to_vec();
        let mut out = Array2::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                let mut s = 0.0;
                for a in 0..h {
                    for b in 0..w {
                        s += x[[i, j, a, b]];
                    }
                }
                out[[i, j]] = s / self.spatial as f32;
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Array2<f32>) -> Array4<f32> {
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let scale = 1.0 / self.spatial as f32;
        let mut out = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for j in 0..c {
                let g = grad[[i, j]] * scale;
                for a in 0..h {
                    for b in 0..w {
                        out[[i, j, a, b]] = g;
                    }
                }
            }
        }
        out
    }
}

/// FNV-1a hash over the raw parameter bytes; used to assert parameter
/// freezes and determinism in tests and pipeline invariants.
pub fn param_hash<'a>(params: impl IntoIterator<Item = &'a Param>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in params {
        for v in p.value.iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}
