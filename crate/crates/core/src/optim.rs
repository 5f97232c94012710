//! Stochastic gradient descent with heavy-ball momentum, and Adam for the
//! edge detector.

use crate::tensor::{Real, Tensor};

/// `v ← μ·v + g; θ ← θ − lr·v`, one velocity buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::from_f64(lr * c2.sqrt() / c1);
        let eps = T::from_f64(self.eps * c2.sqrt());
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pi, &gi), mi), vi) in it {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Element-wise mean of per-sample gradient lists, summed in list order.
pub fn average_grads<T: Real>(per_sample: &[Vec<Tensor<T>>]) -> Vec<Tensor<T>> {
    let mut acc = per_sample[0].clone();
    for sample in &per_sample[1..] {
        for (a, g) in acc.iter_mut().zip(sample) {
            a.add_assign(g);
        }
    }
    let inv = T::one() / T::from_f64(per_sample.len() as f64);
    for a in acc.iter_mut() {
        for x in a.data_mut() {
            *x *= inv;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut opt = Sgd::new(&p, 0.9);
        opt.step(&mut p, &[Tensor::ones(&[3])], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![Tensor::<f64>::zeros(&[1])];
        let mut opt = Sgd::new(&p, 0.5);
        let g = [Tensor::ones(&[1])];
        opt.step(&mut p, &g, 1.0);
        assert_eq!(p[0].item(), -1.0);
        opt.step(&mut p, &g, 1.0);
        assert_eq!(p[0].item(), -2.5);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let mut opt = Adam::new(&p);
        let g = [Tensor::new(&[2], vec![3.0, -0.01]).unwrap()];
        opt.step(&mut p, &g, 0.1);
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
        assert!((p[0].data()[1] - 0.1).abs() < 1e-4);
    }
}
