use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassifierSpec, Network};
use crate::nn::{BatchNorm2d, Conv2d, Features, GlobalAvgPool, Linear, Param, Relu};

/// Pre-activation ResNet-20 for CIFAR: 16-wide stem, three stages of three
/// pre-act basic blocks (16/32/64), final BN+ReLU, pool, linear head.
pub struct PreResNet20 {
    spec: ClassifierSpec,
    stem: Conv2d,
    blocks: Vec<PreBlock>,
    final_bn: BatchNorm2d,
    final_relu: Relu,
    pool: GlobalAvgPool,
    head: Linear,
}

struct PreBlock {
    bn1: BatchNorm2d,
    relu1: Relu,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    conv2: Conv2d,
    // plain 1x1 conv on the raw block input
    downsample: Option<Conv2d>,
}

impl PreBlock {
    fn new(rng: &mut ChaCha8Rng, in_planes: usize, planes: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || in_planes != planes)
            .then(|| Conv2d::new(rng, in_planes, planes, 1, stride, 0, 1, false));
        PreBlock {
            bn1: BatchNorm2d::new(in_planes),
            relu1: Relu::new(),
            conv1: Conv2d::new(rng, in_planes, planes, 3, stride, 1, 1, false),
            bn2: BatchNorm2d::new(planes),
            relu2: Relu::new(),
            conv2: Conv2d::new(rng, planes, planes, 3, 1, 1, 1, false),
            downsample,
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let mut out = self.bn1.forward(x, train);
        out = self
            .relu1
            .forward(&out.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        out = self.conv1.forward(&out, train);
        out = self.bn2.forward(&out, train);
        out = self
            .relu2
            .forward(&out.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        out = self.conv2.forward(&out, train);
        let residual = match &mut self.downsample {
            Some(conv) => conv.forward(x, train),
            None => x.clone(),
        };
        out + residual
    }

    fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let g = self.conv2.backward(grad);
        let g = self
            .relu2
            .backward(&g.into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let g = self.bn2.backward(&g);
        let g = self.conv1.backward(&g);
        let g = self
            .relu1
            .backward(&g.into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let mut gx = self.bn1.backward(&g);
        match &mut self.downsample {
            Some(conv) => gx += &conv.backward(grad),
            None => gx += grad,
        }
        gx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.bn1.params();
        p.extend(self.conv1.params());
        p.extend(self.bn2.params());
        p.extend(self.conv2.params());
        if let Some(c) = &self.downsample {
            p.extend(c.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.bn1.params_mut();
        p.extend(self.conv1.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.conv2.params_mut());
        if let Some(c) = &mut self.downsample {
            p.extend(c.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        let mut b = self.bn1.buffers_mut();
        b.extend(self.bn2.buffers_mut());
        b
    }
}

impl PreResNet20 {
    pub fn new(spec: &ClassifierSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let stem = Conv2d::new(&mut rng, 3, 16, 3, 1, 1, 1, false);
        let mut blocks = Vec::new();
        let mut in_planes = 16;
        for (planes, stride) in [(16, 1), (32, 2), (64, 2)] {
            for s in [stride, 1, 1] {
                blocks.push(PreBlock::new(&mut rng, in_planes, planes, s));
                in_planes = planes;
            }
        }
        PreResNet20 {
            spec: *spec,
            stem,
            blocks,
            final_bn: BatchNorm2d::new(64),
            final_relu: Relu::new(),
            pool: GlobalAvgPool::new(),
            head: Linear::new(&mut rng, 64, spec.num_classes, true),
        }
    }
}

impl Network for PreResNet20 {
    fn forward(&mut self, x: &Features, train: bool) -> Array2<f32> {
        let mut h = self.stem.forward(x.as_image(), train);
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        h = self.final_bn.forward(&h, train);
        h = self
            .final_relu
            .forward(&h.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let flat = self.pool.forward(&h);
        self.head.forward(&flat, train)
    }

    fn backward(&mut self, grad: &Array2<f32>) {
        let g = self.head.backward(grad);
        let g = self.pool.backward(&g);
        let g = self
            .final_relu
            .backward(&g.into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let mut g = self.final_bn.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let _ = self.stem.backward(&g);
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.final_bn.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.final_bn.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        let mut b = Vec::new();
        for blk in &self.blocks {
            b.extend(blk.buffers());
        }
        b.extend(self.final_bn.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        let mut b = Vec::new();
        for blk in &mut self.blocks {
            b.extend(blk.buffers_mut());
        }
        b.extend(self.final_bn.buffers_mut());
        b
    }
}
