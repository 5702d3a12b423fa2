//! Adaptive-moment parameter updates with global gradient-norm clipping.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected moment update over every parameter that has a
    /// gradient; parameters without one are left untouched.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params {
            let Some(grad) = p.grad_vec() else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i].as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                data[i] = T::from_f64(data[i].as_f64() - update);
            }
        }
    }
}

/// Euclidean norm of all gradients taken together; if it exceeds `max_norm`
/// every gradient is scaled down so the total norm equals `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(params: &[(String, Tensor<T>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad_mut().as_ref() {
            for v in g {
                let x = v.as_f64();
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for (_, p) in params {
            if let Some(g) = p.grad_mut().as_mut() {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm
}
