use ndarray::{Array1, Array4};

use super::{Param, ParamKind};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Batch normalization over the channel axis of NCHW tensors.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Param, // gamma [c]
    pub bias: Param,   // beta [c]
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    channels: usize,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::new(Array1::ones(channels).into_dyn(), ParamKind::Norm),
            bias: Param::new(Array1::zeros(channels).into_dyn(), ParamKind::Norm),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        assert_eq!(x.shape()[1], self.channels, "batchnorm channel mismatch");
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let count = (n * h * w) as f32;
        let gamma = self.weight.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array4::zeros(x.raw_dim());

        if train {
            let mut mean = Array1::<f32>::zeros(c);
            let mut var = Array1::<f32>::zeros(c);
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    for a in 0..h {
                        for b in 0..w {
                            s += x[[i, j, a, b]];
                        }
                    }
                }
                mean[j] = s / count;
            }
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    for a in 0..h {
                        for b in 0..w {
                            let d = x[[i, j, a, b]] - mean[j];
                            s += d * d;
                        }
                    }
                }
                var[j] = s / count;
            }
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let mut xhat = Array4::zeros(x.raw_dim());
            for j in 0..c {
                for i in 0..n {
                    for a in 0..h {
                        for b in 0..w {
                            let xh = (x[[i, j, a, b]] - mean[j]) * inv_std[j];
                            xhat[[i, j, a, b]] = xh;
                            out[[i, j, a, b]] = gamma[j] * xh + beta[j];
                        }
                    }
                }
            }
            // unbiased running variance, matching the usual convention
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for j in 0..c {
                self.running_mean[j] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * mean[j];
                self.running_var[j] =
                    (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * var[j] * unbias;
            }
            self.cache = Some(BnCache { xhat, inv_std });
        } else {
            for j in 0..c {
                let inv = 1.0 / (self.running_var[j] + BN_EPS).sqrt();
                for i in 0..n {
                    for a in 0..h {
                        for b in 0..w {
                            out[[i, j, a, b]] =
                                gamma[j] * (x[[i, j, a, b]] - self.running_mean[j]) * inv + beta[j];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("batchnorm backward without forward");
        let (n, c, h, w) = (
            grad.shape()[0],
            grad.shape()[1],
            grad.shape()[2],
            grad.shape()[3],
        );
        let count = (n * h * w) as f32;
        let gamma = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();

        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let mut sum_g = Array1::<f32>::zeros(c);
        let mut sum_gx = Array1::<f32>::zeros(c);
        for j in 0..c {
            for i in 0..n {
                for a in 0..h {
                    for b in 0..w {
                        let g = grad[[i, j, a, b]];
                        let xh = cache.xhat[[i, j, a, b]];
                        dgamma[j] += g * xh;
                        dbeta[j] += g;
                        sum_g[j] += g;
                        sum_gx[j] += g * xh;
                    }
                }
            }
        }
        let mut dx = Array4::zeros(grad.raw_dim());
        for j in 0..c {
            let scale = gamma[j] * cache.inv_std[j] / count;
            for i in 0..n {
                for a in 0..h {
                    for b in 0..w {
                        let g = grad[[i, j, a, b]];
                        let xh = cache.xhat[[i, j, a, b]];
                        dx[[i, j, a, b]] = scale * (count * g - sum_g[j] - xh * sum_gx[j]);
                    }
                }
            }
        }
        self.weight.grad += &dgamma.into_dyn();
        self.bias.grad += &dbeta.into_dyn();
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    /// Non-trainable state (running mean and variance), exposed so
    /// checkpoints can round-trip evaluation behaviour exactly.
    pub fn buffers(&self) -> Vec<&Array1<f32>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<f32>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
