use ndarray::ArrayD;

use super::Param;

/// Parameter update rule. State is kept per parameter, aligned by index,
/// so a given optimizer instance must always be fed the same parameter list.
pub trait Optimizer {
    fn step(&mut self, params: &mut [&mut Param]);
    fn set_lr(&mut self, lr: f32);
    fn lr(&self) -> f32;
}

/// SGD with classical momentum and decoupled L2 weight decay added to the
/// gradient (the usual `weight_decay` convention).
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Param]) {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "optimizer/param list drift");
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let mut g = p.grad.clone();
            if self.weight_decay != 0.0 {
                g += &(&p.value * self.weight_decay);
            }
            if self.momentum != 0.0 {
                *v *= self.momentum;
                *v += &g;
                p.value.scaled_add(-self.lr, v);
            } else {
                p.value.scaled_add(-self.lr, &g);
            }
        }
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn lr(&self) -> f32 {
        self.lr
    }
}

/// Adam with the standard bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer/param list drift");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = &p.grad;
            *m *= self.beta1;
            m.scaled_add(1.0 - self.beta1, g);
            *v *= self.beta2;
            let g2 = g.mapv(|x| x * x);
            v.scaled_add(1.0 - self.beta2, &g2);
            let mhat = m.mapv(|x| x / bc1);
            let vhat = v.mapv(|x| x / bc2);
            let update = &mhat / &vhat.mapv(|x| x.sqrt() + self.eps);
            p.value.scaled_add(-self.lr, &update);
        }
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn lr(&self) -> f32 {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use ndarray::arr1;

    fn quad_param(x0: f32) -> Param {
        Param::new(arr1(&[x0]).into_dyn(), ParamKind::Weight)
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        // f(x) = x^2, grad = 2x
        let mut p = quad_param(5.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        // momentum makes the trajectory oscillate; give it room to settle
        for _ in 0..400 {
            p.zero_grad();
            let x = p.value[[0]];
            p.grad[[0]] = 2.0 * x;
            opt.step(&mut [&mut p]);
        }
        assert!(p.value[[0]].abs() < 1e-3);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = quad_param(3.0);
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            p.zero_grad();
            let x = p.value[[0]];
            p.grad[[0]] = 2.0 * x;
            opt.step(&mut [&mut p]);
        }
        assert!(p.value[[0]].abs() < 1e-2);
    }
}
