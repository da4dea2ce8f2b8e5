use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use super::{uniform_init, Param, ParamKind};

/// 2D convolution over NCHW tensors, implemented via im2col. Supports
/// strides, symmetric zero padding, and grouped/depthwise convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param, // [out_c, in_c/groups, kh, kw]
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    cached_input: Option<Array4<f32>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(in_channels % groups == 0 && out_channels % groups == 0);
        let cg = in_channels / groups;
        let fan_in = cg * kernel * kernel;
        let weight = Param::new(
            uniform_init(rng, &[out_channels, cg, kernel, kernel], fan_in),
            ParamKind::Weight,
        );
        let bias = bias.then(|| Param::new(uniform_init(rng, &[out_channels], fan_in), ParamKind::Bias));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            cached_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// im2col for one group slice: returns [n*oh*ow, cg*k*k].
    fn im2col(&self, x: &Array4<f32>, c_start: usize, cg: usize) -> Array2<f32> {
        let (n, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((n * oh * ow, cg * k * k));
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (ni * oh + oy) * ow + ox;
                    let iy0 = (oy * self.stride) as isize - self.padding as isize;
                    let ix0 = (ox * self.stride) as isize - self.padding as isize;
                    let mut col = 0;
                    for c in 0..cg {
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    cols[[row, col]] =
                                        x[[ni, c_start + c, iy as usize, ix as usize]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add of column gradients back into the input gradient.
    fn col2im(
        &self,
        dcols: &Array2<f32>,
        dx: &mut Array4<f32>,
        c_start: usize,
        cg: usize,
        oh: usize,
        ow: usize,
    ) {
        let (n, _, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2], dx.shape()[3]);
        let k = self.kernel;
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (ni * oh + oy) * ow + ox;
                    let iy0 = (oy * self.stride) as isize - self.padding as isize;
                    let ix0 = (ox * self.stride) as isize - self.padding as isize;
                    let mut col = 0;
                    for c in 0..cg {
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    dx[[ni, c_start + c, iy as usize, ix as usize]] +=
                                        dcols[[row, col]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        assert_eq!(x.shape()[1], self.in_channels, "conv input channels mismatch");
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_size(h, w);
        let cg = self.in_channels / self.groups;
        let ocg = self.out_channels / self.groups;
        let k = self.kernel;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape((self.out_channels, cg * k * k))
            .unwrap()
            .to_owned();
        let mut out = Array4::zeros((n, self.out_channels, oh, ow));
        for g in 0..self.groups {
            let cols = self.im2col(x, g * cg, cg);
            let wg = wmat.slice(ndarray::s![g * ocg..(g + 1) * ocg, ..]);
            let yg = cols.dot(&wg.t()); // [n*oh*ow, ocg]
            for ni in 0..n {
                for oc in 0..ocg {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out[[ni, g * ocg + oc, oy, ox]] = yg[[(ni * oh + oy) * ow + ox, oc]];
                        }
                    }
                }
            }
        }
        if let Some(b) = &self.bias {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for ni in 0..n {
                for oc in 0..self.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out[[ni, oc, oy, ox]] += bv[oc];
                        }
                    }
                }
            }
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let x = self
            .cached_input
            .take()
            .expect("conv backward without forward");
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_size(h, w);
        let cg = self.in_channels / self.groups;
        let ocg = self.out_channels / self.groups;
        let k = self.kernel;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape((self.out_channels, cg * k * k))
            .unwrap()
            .to_owned();
        let mut dx = Array4::zeros(x.raw_dim());
        let mut dw = Array2::<f32>::zeros((self.out_channels, cg * k * k));
        for g in 0..self.groups {
            // grad slice for this group as [n*oh*ow, ocg]
            let mut gy = Array2::zeros((n * oh * ow, ocg));
            for ni in 0..n {
                for oc in 0..ocg {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gy[[(ni * oh + oy) * ow + ox, oc]] = grad[[ni, g * ocg + oc, oy, ox]];
                        }
                    }
                }
            }
            let cols = self.im2col(&x, g * cg, cg);
            let dwg = gy.t().dot(&cols); // [ocg, cg*k*k]
            dw.slice_mut(ndarray::s![g * ocg..(g + 1) * ocg, ..])
                .assign(&dwg);
            let wg = wmat.slice(ndarray::s![g * ocg..(g + 1) * ocg, ..]);
            let dcols = gy.dot(&wg); // [n*oh*ow, cg*k*k]
            self.col2im(&dcols, &mut dx, g * cg, cg, oh, ow);
        }
        self.weight.grad += &dw
            .into_shape((self.out_channels, cg, k, k))
            .unwrap()
            .into_dyn();
        if let Some(b) = &mut self.bias {
            let mut db = Array1::<f32>::zeros(self.out_channels);
            for ni in 0..n {
                for oc in 0..self.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            db[oc] += grad[[ni, oc, oy, ox]];
                        }
                    }
                }
            }
            b.grad += &db.into_dyn();
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.weight];
        if let Some(b) = &self.bias {
            p.push(b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn finite_diff_input(conv: &mut Conv2d, x: &Array4<f32>, idx: (usize, usize, usize, usize)) -> f32 {
        let eps = 1e-2f32;
        let mut xp = x.clone();
        xp[[idx.0, idx.1, idx.2, idx.3]] += eps;
        let mut xm = x.clone();
        xm[[idx.0, idx.1, idx.2, idx.3]] -= eps;
        (conv.forward(&xp, false).sum() - conv.forward(&xm, false).sum()) / (2.0 * eps)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(&mut rng, 2, 3, 3, 2, 1, 1, true);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d) as f32 * 0.17).sin()
        });
        let y = conv.forward(&x, true);
        let dx = conv.backward(&Array4::ones(y.raw_dim()));
        for &idx in &[(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4), (1, 0, 3, 1)] {
            let fd = finite_diff_input(&mut conv, &x, idx);
            let an = dx[[idx.0, idx.1, idx.2, idx.3]];
            assert!((an - fd).abs() < 1e-2, "input grad mismatch {an} vs {fd}");
        }
    }

    #[test]
    fn depthwise_conv_grouping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::new(&mut rng, 4, 4, 3, 1, 1, 4, false);
        let x = Array4::from_shape_fn((1, 4, 4, 4), |(_, b, c, d)| (b + c + d) as f32);
        let y = conv.forward(&x, true);
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
        // weight grads accumulate per group
        let _ = conv.backward(&Array4::ones(y.raw_dim()));
        assert_eq!(conv.weight.grad.shape(), &[4, 1, 3, 3]);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(&mut rng, 2, 2, 3, 1, 1, 2, true);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, b, c, d)| ((b * 7 + c * 3 + d) as f32).cos());
        let y = conv.forward(&x, true);
        let _ = conv.backward(&Array4::ones(y.raw_dim()));
        let analytic = conv.weight.grad[[1, 0, 1, 1]];
        let eps = 1e-2f32;
        conv.weight.value[[1, 0, 1, 1]] += eps;
        let up = conv.forward(&x, false).sum();
        conv.weight.value[[1, 0, 1, 1]] -= 2.0 * eps;
        let down = conv.forward(&x, false).sum();
        let fd = (up - down) / (2.0 * eps);
        assert!((analytic - fd).abs() < 1e-2, "{analytic} vs {fd}");
    }
}
