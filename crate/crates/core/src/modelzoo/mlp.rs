use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassifierSpec, Network};
use crate::error::{Error, Result};
use crate::nn::{Features, Linear, Param, Relu};

/// Three-hidden-layer MLP for flat synthetic features.
pub struct MlpSmall {
    spec: ClassifierSpec,
    layers: Vec<Linear>,
    relus: Vec<Relu>,
}

const HIDDEN: [usize; 3] = [256, 128, 64];

impl MlpSmall {
    pub fn new(spec: &ClassifierSpec) -> Result<Self> {
        if spec.input_dim == 0 {
            return Err(Error::invalid("mlp_small needs a positive input_dim"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        let mut prev = spec.input_dim;
        for &h in &HIDDEN {
            layers.push(Linear::new(&mut rng, prev, h, true));
            prev = h;
        }
        layers.push(Linear::new(&mut rng, prev, spec.num_classes, true));
        Ok(MlpSmall {
            spec: *spec,
            layers,
            relus: (0..HIDDEN.len()).map(|_| Relu::new()).collect(),
        })
    }
}

impl Network for MlpSmall {
    fn forward(&mut self, x: &Features, train: bool) -> Array2<f32> {
        let mut h = x.as_flat().clone();
        for i in 0..HIDDEN.len() {
            h = self.layers[i].forward(&h, train);
            h = self.relus[i]
                .forward(&h.into_dyn(), train)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
        }
        self.layers[HIDDEN.len()].forward(&h, train)
    }

    fn backward(&mut self, grad: &Array2<f32>) {
        let mut g = self.layers[HIDDEN.len()].backward(grad);
        for i in (0..HIDDEN.len()).rev() {
            g = self.relus[i]
                .backward(&g.into_dyn())
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            g = self.layers[i].backward(&g);
        }
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }
}
