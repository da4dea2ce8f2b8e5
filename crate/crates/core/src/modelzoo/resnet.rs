use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassifierSpec, Network};
use crate::nn::{BatchNorm2d, Conv2d, Features, GlobalAvgPool, Linear, Param, Relu};

/// CIFAR ResNet-18: 3x3 stem (no max-pool), four stages of two basic blocks
/// at widths 64/128/256/512, global average pool, linear head.
pub struct ResNet18 {
    spec: ClassifierSpec,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stem_relu: Relu,
    blocks: Vec<BasicBlock>,
    pool: GlobalAvgPool,
    head: Linear,
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(rng: &mut ChaCha8Rng, in_planes: usize, planes: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || in_planes != planes).then(|| {
            (
                Conv2d::new(rng, in_planes, planes, 1, stride, 0, 1, false),
                BatchNorm2d::new(planes),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(rng, in_planes, planes, 3, stride, 1, 1, false),
            bn1: BatchNorm2d::new(planes),
            relu1: Relu::new(),
            conv2: Conv2d::new(rng, planes, planes, 3, 1, 1, 1, false),
            bn2: BatchNorm2d::new(planes),
            shortcut,
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let mut out = self.bn1.forward(&self.conv1.forward(x, train), train);
        out = self
            .relu1
            .forward(&out.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        out = self.bn2.forward(&self.conv2.forward(&out, train), train);
        let sc = match &mut self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x, train), train),
            None => x.clone(),
        };
        out += &sc;
        self.relu_out
            .forward(&out.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
    }

    fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let g = self
            .relu_out
            .backward(&grad.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        // main branch
        let gm = self.bn2.backward(&g);
        let gm = self.conv2.backward(&gm);
        let gm = self
            .relu1
            .backward(&gm.into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let gm = self.bn1.backward(&gm);
        let mut gx = self.conv1.backward(&gm);
        // shortcut branch
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let gs = bn.backward(&g);
                gx += &conv.backward(&gs);
            }
            None => gx += &g,
        }
        gx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some((c, b)) = &self.shortcut {
            p.extend(c.params());
            p.extend(b.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.shortcut {
            p.extend(c.params_mut());
            p.extend(b.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        if let Some((_, bn)) = &self.shortcut {
            b.extend(bn.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        let mut b = self.bn1.buffers_mut();
        b.extend(self.bn2.buffers_mut());
        if let Some((_, bn)) = &mut self.shortcut {
            b.extend(bn.buffers_mut());
        }
        b
    }
}

impl ResNet18 {
    pub fn new(spec: &ClassifierSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let stem = Conv2d::new(&mut rng, 3, 64, 3, 1, 1, 1, false);
        let stem_bn = BatchNorm2d::new(64);
        let mut blocks = Vec::new();
        let mut in_planes = 64;
        for (planes, stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
            for (i, s) in [stride, 1].into_iter().enumerate() {
                let _ = i;
                blocks.push(BasicBlock::new(&mut rng, in_planes, planes, s));
                in_planes = planes;
            }
        }
        let head = Linear::new(&mut rng, 512, spec.num_classes, true);
        ResNet18 {
            spec: *spec,
            stem,
            stem_bn,
            stem_relu: Relu::new(),
            blocks,
            pool: GlobalAvgPool::new(),
            head,
        }
    }
}

impl Network for ResNet18 {
    fn forward(&mut self, x: &Features, train: bool) -> Array2<f32> {
        let mut h = self
            .stem_bn
            .forward(&self.stem.forward(x.as_image(), train), train);
        h = self
            .stem_relu
            .forward(&h.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        let flat = self.pool.forward(&h);
        self.head.forward(&flat, train)
    }

    fn backward(&mut self, grad: &Array2<f32>) {
        let g = self.head.backward(grad);
        let mut g = self.pool.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let g = self
            .stem_relu
            .backward(&g.into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let g = self.stem_bn.backward(&g);
        let _ = self.stem.backward(&g);
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.stem_bn.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_bn.params_mut());
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }

    fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        let mut b = self.stem_bn.buffers();
        for blk in &self.blocks {
            b.extend(blk.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        let mut b = self.stem_bn.buffers_mut();
        for blk in &mut self.blocks {
            b.extend(blk.buffers_mut());
        }
        b
    }
}
