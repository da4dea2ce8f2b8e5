use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassifierSpec, Network};
use crate::nn::{BatchNorm2d, Conv2d, Features, GlobalAvgPool, Linear, Param, Relu};

/// CIFAR MobileNetV2: inverted-residual bottlenecks with ReLU6, biased convs,
/// a 1x1 stem, and a 1280-wide head.
pub struct MobileNetV2 {
    spec: ClassifierSpec,
    stem: ConvBnAct,
    blocks: Vec<Bottleneck>,
    head_conv: ConvBnAct,
    pool: GlobalAvgPool,
    head: Linear,
}

struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Relu,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        ConvBnAct {
            conv: Conv2d::new(rng, in_c, out_c, kernel, stride, padding, groups, true),
            bn: BatchNorm2d::new(out_c),
            act: Relu::capped(6.0),
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let h = self.bn.forward(&self.conv.forward(x, train), train);
        self.act
            .forward(&h.into_dyn(), train)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
    }

    fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let g = self
            .act
            .backward(&grad.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
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

struct Bottleneck {
    expand: ConvBnAct,
    depthwise: ConvBnAct,
    project: Conv2d,
    project_bn: BatchNorm2d,
    use_residual: bool,
}

impl Bottleneck {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize, t: usize) -> Self {
        let mid = in_c * t;
        Bottleneck {
            expand: ConvBnAct::new(rng, in_c, mid, 1, 1, 0, 1),
            depthwise: ConvBnAct::new(rng, mid, mid, 3, stride, 1, mid),
            project: Conv2d::new(rng, mid, out_c, 1, 1, 0, 1, true),
            project_bn: BatchNorm2d::new(out_c),
            use_residual: stride == 1 && in_c == out_c,
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let h = self.expand.forward(x, train);
        let h = self.depthwise.forward(&h, train);
        let mut h = self
            .project_bn
            .forward(&self.project.forward(&h, train), train);
        if self.use_residual {
            h += x;
        }
        h
    }

    fn backward(&mut self, grad: &Array4<f32>) -> Array4<f32> {
        let g = self.project_bn.backward(grad);
        let g = self.project.backward(&g);
        let g = self.depthwise.backward(&g);
        let mut gx = self.expand.backward(&g);
        if self.use_residual {
            gx += grad;
        }
        gx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.expand.params();
        p.extend(self.depthwise.params());
        p.extend(self.project.params());
        p.extend(self.project_bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.expand.params_mut();
        p.extend(self.depthwise.params_mut());
        p.extend(self.project.params_mut());
        p.extend(self.project_bn.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        let mut b = self.expand.buffers();
        b.extend(self.depthwise.buffers());
        b.extend(self.project_bn.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        let mut b = self.expand.buffers_mut();
        b.extend(self.depthwise.buffers_mut());
        b.extend(self.project_bn.buffers_mut());
        b
    }
}

// (expansion t, out channels, repeats, first stride)
const CFG: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 1),
    (6, 320, 1, 1),
];

impl MobileNetV2 {
    pub fn new(spec: &ClassifierSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let stem = ConvBnAct::new(&mut rng, 3, 32, 1, 1, 1, 1);
        let mut blocks = Vec::new();
        let mut in_c = 32;
        for (t, out_c, repeats, stride) in CFG {
            for i in 0..repeats {
                let s = if i == 0 { stride } else { 1 };
                blocks.push(Bottleneck::new(&mut rng, in_c, out_c, s, t));
                in_c = out_c;
            }
        }
        let head_conv = ConvBnAct::new(&mut rng, 320, 1280, 1, 1, 0, 1);
        let head = Linear::new(&mut rng, 1280, spec.num_classes, true);
        MobileNetV2 {
            spec: *spec,
            stem,
            blocks,
            head_conv,
            pool: GlobalAvgPool::new(),
            head,
        }
    }
}

impl Network for MobileNetV2 {
    fn forward(&mut self, x: &Features, train: bool) -> Array2<f32> {
        let mut h = self.stem.forward(x.as_image(), train);
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        h = self.head_conv.forward(&h, train);
        let flat = self.pool.forward(&h);
        self.head.forward(&flat, train)
    }

    fn backward(&mut self, grad: &Array2<f32>) {
        let g = self.head.backward(grad);
        let g = self.pool.backward(&g);
        let mut g = self.head_conv.backward(&g);
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
        p.extend(self.head_conv.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.head_conv.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    fn buffers(&self) -> Vec<&ndarray::Array1<f32>> {
        let mut b = self.stem.buffers();
        for blk in &self.blocks {
            b.extend(blk.buffers());
        }
        b.extend(self.head_conv.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<f32>> {
        let mut b = self.stem.buffers_mut();
        for blk in &mut self.blocks {
            b.extend(blk.buffers_mut());
        }
        b.extend(self.head_conv.buffers_mut());
        b
    }
}
