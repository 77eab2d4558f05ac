//! AdamW with decoupled weight decay and bias-corrected moments.

use super::TrainConfig;
use crate::encoder::EncoderParams;
use crate::mat::Mat;

/// Optimizer state: first/second moment estimates per tensor, laid out in
/// the parameter visitor order.
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &EncoderParams, cfg: &TrainConfig) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor(&mut |_, t| m.push(Mat::zeros(t.rows(), t.cols())));
        let v = m.clone();
        Self {
            m,
            v,
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update. `grads` is aligned with the parameter visitor order; a
    /// missing entry is a zero gradient (decay and moment updates still
    /// apply).
    pub fn apply(&mut self, params: &mut EncoderParams, grads: &[Option<&Mat>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        let decay = 1.0 - lr * self.weight_decay;
        let mut idx = 0;
        params.for_each_tensor_mut(&mut |_, w| {
            let g = grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..w.as_slice().len() {
                let gi = g.map_or(0.0, |g| g.as_slice()[i]);
                let wi = &mut w.as_mut_slice()[i];
                *wi *= decay;
                let mi = &mut m.as_mut_slice()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.as_mut_slice()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
            idx += 1;
        });
    }
}
