use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::{uniform_init, Param, ParamKind};

/// Fully-connected layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // [out, in]
    pub bias: Option<Param>,
    in_features: usize,
    out_features: usize,
    cached_input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize, bias: bool) -> Self {
        let weight = Param::new(
            uniform_init(rng, &[out_features, in_features], in_features),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            Param::new(uniform_init(rng, &[out_features], in_features), ParamKind::Bias)
        });
        Linear {
            weight,
            bias,
            in_features,
            out_features,
            cached_input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        assert_eq!(x.ncols(), self.in_features, "linear input width mismatch");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        if let Some(b) = &self.bias {
            let bv = b
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            y += &bv;
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        y
    }

    /// Forward pass without caching; usable through a shared reference.
    pub fn eval(&self, x: &Array2<f32>) -> Array2<f32> {
        assert_eq!(x.ncols(), self.in_features, "linear input width mismatch");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        if let Some(b) = &self.bias {
            let bv = b
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            y += &bv;
        }
        y
    }

    pub fn backward(&mut self, grad: &Array2<f32>) -> Array2<f32> {
        let x = self
            .cached_input
            .take()
            .expect("linear backward without forward");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let dw = grad.t().dot(&x);
        self.weight.grad += &dw.into_dyn();
        if let Some(b) = &mut self.bias {
            let db: Array1<f32> = grad.sum_axis(ndarray::Axis(0));
            b.grad += &db.into_dyn();
        }
        grad.dot(&w)
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
