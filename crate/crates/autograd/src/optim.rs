use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(t));
        let c2 = T::one() - T::of(self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (id, g) in grads.iter() {
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors in parameter order, for persistence.
    pub fn state(&self) -> (u64, &[Tensor<T>], &[Tensor<T>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> bool {
        let shapes_match = |saved: &[Tensor<T>], current: &[Tensor<T>]| {
            saved.len() == current.len() && saved.iter().zip(current).all(|(a, b)| a.shape() == b.shape())
        };
        if !shapes_match(&first, &self.first) || !shapes_match(&second, &self.second) {
            return false;
        }
        self.step = step;
        self.first = first;
        self.second = second;
        true
    }

    pub fn moment(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.first[id.index()], &self.second[id.index()])
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}
