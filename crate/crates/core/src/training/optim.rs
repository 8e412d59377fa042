//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use crate::matrix::Matrix;
use crate::scalar::Scalar;

use super::TrainConfig;

/// Learning rate at `step` of `total` steps, decaying from `start` at the
/// first step to `end` at the last along a half cosine.
pub fn cosine_lr(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct AdamW<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Matrix<T>], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                ms[i] = b1 * ms[i] + (T::one() - b1) * gi;
                vs[i] = b2 * vs[i] + (T::one() - b2) * gi * gi;
                let mhat = ms[i] / c1;
                let vhat = vs[i] / c2;
                ps[i] = ps[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
