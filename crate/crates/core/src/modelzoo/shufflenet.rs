use ndarray::{s, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassifierSpec, Network};
use crate::nn::{BatchNorm2d, Conv2d, Features, GlobalAvgPool, Linear, Param, Relu};

/// CIFAR ShuffleNetV2 (1.0x): channel-split units with a two-group channel
/// shuffle, stage widths 116/232/464, and a 1024-wide head.
pub struct ShuffleNetV2 {
    spec: ClassifierSpec,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    units: Vec<Unit>,
    head_conv: Conv2d,
    head_bn: BatchNorm2d,
    head_relu: Relu,
    pool: GlobalAvgPool,
    fc: Linear,
}

/// Two-group channel shuffle: out[b*2 + a] = in[a*(c/2) + b].
fn channel_shuffle(x: &Array4<f32>) -> Array4<f32> {
    let c = x.shape()[1];
    let half = c / 2;
    let mut out = Array4::zeros(x.raw_dim());
    for a in 0..2 {
        for b in 0..half {
            out.slice_mut(s![.., b * 2 + a, .., ..])
                .assign(&x.slice(s![.., a * half + b, .., ..]));
        }
    }
    out
}

fn channel_shuffle_backward(grad: &Array4<f32>) -> Array4<f32> {
    let c = grad.shape()[1];
    let half = c / 2;
    let mut out = Array4::zeros(grad.raw_dim());
    for a in 0..2 {
        for b in 0..half {
            out.slice_mut(s![.., a * half + b, .., ..])
                .assign(&grad.slice(s![.., b * 2 + a, .., ..]));
        }
    }
    out
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Option<Relu>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        relu: bool,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(rng, in_c, out_c, kernel, stride, padding, groups, true),
            bn: BatchNorm2d::new(out_c),
            relu: relu.then(Relu::new),
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let h = self.bn.forward(&self.conv.forward(x, train), train);
        match &mut self.relu {
            Some(r) => r
                .forward(&h.into_dyn(), train)
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap(),
            None => h,
        }
    }

    fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let g = match &mut self.relu {
            Some(r) => r
                .backward(&grad.clone().into_dyn())
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap(),
            None => grad.clone(),
        };
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        self.bn.buffers_mut()
    }
}

enum Unit {
    /// stride 1, equal channels: split, transform the second half, concat.
    Basic {
        half: usize,
        residual: Vec<ConvBn>,
    },
    /// spatial downsampling: both halves derived from the full input.
    Down {
        shortcut: Vec<ConvBn>,
        residual: Vec<ConvBn>,
    },
}

impl Unit {
    fn basic(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let half = channels / 2;
        Unit::Basic {
            half,
            residual: vec![
                ConvBn::new(rng, half, half, 1, 1, 0, 1, true),
                ConvBn::new(rng, half, half, 3, 1, 1, half, false),
                ConvBn::new(rng, half, half, 1, 1, 0, 1, true),
            ],
        }
    }

    fn down(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> Self {
        let half = out_c / 2;
        Unit::Down {
            shortcut: vec![
                ConvBn::new(rng, in_c, in_c, 3, 2, 1, in_c, false),
                ConvBn::new(rng, in_c, half, 1, 1, 0, 1, true),
            ],
            residual: vec![
                ConvBn::new(rng, in_c, in_c, 1, 1, 0, 1, true),
                ConvBn::new(rng, in_c, in_c, 3, 2, 1, in_c, false),
                ConvBn::new(rng, in_c, half, 1, 1, 0, 1, true),
            ],
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        match self {
            Unit::Basic { half, residual } => {
                let h = *half;
                let shortcut = x.slice(s![.., ..h, .., ..]).to_owned();
                let mut r = x.slice(s![.., h.., .., ..]).to_owned();
                for layer in residual.iter_mut() {
                    r = layer.forward(&r, train);
                }
                let (n, _, hh, ww) = (x.shape()[0], 0, r.shape()[2], r.shape()[3]);
                let mut cat = Array4::zeros((n, 2 * h, hh, ww));
                cat.slice_mut(s![.., ..h, .., ..]).assign(&shortcut);
                cat.slice_mut(s![.., h.., .., ..]).assign(&r);
                channel_shuffle(&cat)
            }
            Unit::Down { shortcut, residual } => {
                let mut sc = x.clone();
                for layer in shortcut.iter_mut() {
                    sc = layer.forward(&sc, train);
                }
                let mut r = x.clone();
                for layer in residual.iter_mut() {
                    r = layer.forward(&r, train);
                }
                let (n, c1) = (sc.shape()[0], sc.shape()[1]);
                let (hh, ww) = (sc.shape()[2], sc.shape()[3]);
                let mut cat = Array4::zeros((n, c1 + r.shape()[1], hh, ww));
                cat.slice_mut(s![.., ..c1, .., ..]).assign(&sc);
                cat.slice_mut(s![.., c1.., .., ..]).assign(&r);
                channel_shuffle(&cat)
            }
        }
    }

    fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let g = channel_shuffle_backward(grad);
        match self {
            Unit::Basic { half, residual } => {
                let h = *half;
                let g_short = g.slice(s![.., ..h, .., ..]).to_owned();
                let mut g_res = g.slice(s![.., h.., .., ..]).to_owned();
                for layer in residual.iter_mut().rev() {
                    g_res = layer.backward(&g_res);
                }
                let (n, hh, ww) = (g.shape()[0], g_res.shape()[2], g_res.shape()[3]);
                let mut gx = Array4::zeros((n, 2 * h, hh, ww));
                gx.slice_mut(s![.., ..h, .., ..]).assign(&g_short);
                gx.slice_mut(s![.., h.., .., ..]).assign(&g_res);
                gx
            }
            Unit::Down { shortcut, residual } => {
                let c1 = match shortcut.last() {
                    Some(cb) => cb.conv.out_channels(),
                    None => unreachable!(),
                };
                let mut g_short = g.slice(s![.., ..c1, .., ..]).to_owned();
                for layer in shortcut.iter_mut().rev() {
                    g_short = layer.backward(&g_short);
                }
                let mut g_res = g.slice(s![.., c1.., .., ..]).to_owned();
                for layer in residual.iter_mut().rev() {
                    g_res = layer.backward(&g_res);
                }
                g_short + g_res
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Unit::Basic { residual, .. } => residual.iter().flat_map(|l| l.params()).collect(),
            Unit::Down { shortcut, residual } => shortcut
                .iter()
                .chain(residual.iter())
                .flat_map(|l| l.params())
                .collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Unit::Basic { residual, .. } => {
                residual.iter_mut().flat_map(|l| l.params_mut()).collect()
            }
            Unit::Down { shortcut, residual } => shortcut
                .iter_mut()
                .chain(residual.iter_mut())
                .flat_map(|l| l.params_mut())
                .collect(),
        }
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        match self {
            Unit::Basic { residual, .. } => residual.iter().flat_map(|l| l.buffers()).collect(),
            Unit::Down { shortcut, residual } => shortcut
                .iter()
                .chain(residual.iter())
                .flat_map(|l| l.buffers())
                .collect(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        match self {
            Unit::Basic { residual, .. } => {
                residual.iter_mut().flat_map(|l| l.buffers_mut()).collect()
            }
            Unit::Down { shortcut, residual } => shortcut
                .iter_mut()
                .chain(residual.iter_mut())
                .flat_map(|l| l.buffers_mut())
                .collect(),
        }
    }
}

impl ShuffleNetV2 {
    pub fn new(spec: &ClassifierSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let stem = Conv2d::new(&mut rng, 3, 24, 3, 1, 1, 1, true);
        let stem_bn = BatchNorm2d::new(24);
        let mut units = Vec::new();
        let mut in_c = 24;
        for (out_c, repeats) in [(116usize, 3usize), (232, 7), (464, 3)] {
            units.push(Unit::down(&mut rng, in_c, out_c));
            for _ in 0..repeats {
                units.push(Unit::basic(&mut rng, out_c));
            }
            in_c = out_c;
        }
        let head_conv = Conv2d::new(&mut rng, 464, 1024, 1, 1, 0, 1, true);
        let head_bn = BatchNorm2d::new(1024);
        let fc = Linear::new(&mut rng, 1024, spec.num_classes, true);
        ShuffleNetV2 {
            spec: *spec,
            stem,
            stem_bn,
            units,
            head_conv,
            head_bn,
            head_relu: Relu::new(),
            pool: GlobalAvgPool::new(),
            fc,
        }
    }
}

impl Network for ShuffleNetV2 {
    fn forward(&mut self, x: &Features, train: bool) -> Array2<f32> {
        let mut h = self
            .stem_bn
            .forward(&self.stem.forward(x.as_image(), train), train);
        for u in &mut self.units {
            h = u.forward(&h, train);
        }
        h = self.head_bn.forward(&self.head_conv.forward(&h, train), train);
        h = self
            .head_relu
            .forward(&h.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let flat = self.pool.forward(&h);
        self.fc.forward(&flat, train)
    }

    fn backward(&mut self, grad: &Array2<f32>) {
        let g = self.fc.backward(grad);
        let g = self.pool.backward(&g);
        let g = self
            .head_relu
            .backward(&g.into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let g = self.head_bn.backward(&g);
        let mut g = self.head_conv.backward(&g);
        for u in self.units.iter_mut().rev() {
            g = u.backward(&g);
        }
        let g = self.stem_bn.backward(&g);
        let _ = self.stem.backward(&g);
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.stem_bn.params());
        for u in &self.units {
            p.extend(u.params());
        }
        p.extend(self.head_conv.params());
        p.extend(self.head_bn.params());
        p.extend(self.fc.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_bn.params_mut());
        for u in &mut self.units {
            p.extend(u.params_mut());
        }
        p.extend(self.head_conv.params_mut());
        p.extend(self.head_bn.params_mut());
        p.extend(self.fc.params_mut());
        p
    }

    fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        let mut b = self.stem_bn.buffers();
        for u in &self.units {
            b.extend(u.buffers());
        }
        b.extend(self.head_bn.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        let mut b = self.stem_bn.buffers_mut();
        for u in &mut self.units {
            b.extend(u.buffers_mut());
        }
        b.extend(self.head_bn.buffers_mut());
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_roundtrip() {
        let x = Array4::from_shape_fn((1, 6, 2, 2), |(_, c, h, w)| (c * 4 + h * 2 + w) as f32);
        let y = channel_shuffle(&x);
        // out[b*2+a] = in[a*3+b]
        assert_eq!(y[[0, 0, 0, 0]], x[[0, 0, 0, 0]]);
        assert_eq!(y[[0, 1, 0, 0]], x[[0, 3, 0, 0]]);
        assert_eq!(y[[0, 2, 0, 0]], x[[0, 1, 0, 0]]);
        let back = channel_shuffle_backward(&y);
        assert_eq!(back, x);
    }
}
