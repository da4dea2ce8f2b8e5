use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassifierSpec, Network};
use crate::nn::{Conv2d, Features, GlobalAvgPool, Linear, Param, Relu};

/// Small CIFAR-scale CNN: 4 conv layers (two with stride 2) followed by a
/// global average pool and 2 fully-connected layers.
pub struct CnnSmall {
    spec: ClassifierSpec,
    convs: Vec<Conv2d>,
    conv_relus: Vec<Relu>,
    pool: GlobalAvgPool,
    fc1: Linear,
    fc_relu: Relu,
    fc2: Linear,
}

impl CnnSmall {
    pub fn new(spec: &ClassifierSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let convs = vec![
            Conv2d::new(&mut rng, 3, 32, 3, 1, 1, 1, true),
            Conv2d::new(&mut rng, 32, 32, 3, 2, 1, 1, true),
            Conv2d::new(&mut rng, 32, 64, 3, 1, 1, 1, true),
            Conv2d::new(&mut rng, 64, 64, 3, 2, 1, 1, true),
        ];
        let fc1 = Linear::new(&mut rng, 64, 128, true);
        let fc2 = Linear::new(&mut rng, 128, spec.num_classes, true);
        CnnSmall {
            spec: *spec,
            convs,
            conv_relus: (0..4).map(|_| Relu::new()).collect(),
            pool: GlobalAvgPool::new(),
            fc1,
            fc_relu: Relu::new(),
            fc2,
        }
    }
}

impl Network for CnnSmall {
    fn forward(&mut self, x: &Features, train: bool) -> Array2<f32> {
        let mut h = x.as_image().clone();
        for i in 0..4 {
            h = self.convs[i].forward(&h, train);
            h = self.conv_relus[i]
                .forward(&h.into_dyn(), train)
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
        }
        let flat = self.pool.forward(&h);
        let mut f = self.fc1.forward(&flat, train);
        f = self
            .fc_relu
            .forward(&f.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        self.fc2.forward(&f, train)
    }

    fn backward(&mut self, grad: &Array2<f32>) {
        let g = self.fc2.backward(grad);
        let g = self
            .fc_relu
            .backward(&g.into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let g = self.fc1.backward(&g);
        let mut g = self.pool.backward(&g);
        for i in (0..4).rev() {
            let gd = self.conv_relus[i]
                .backward(&g.into_dyn())
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            g = self.convs[i].backward(&gd);
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }

    fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }
}
