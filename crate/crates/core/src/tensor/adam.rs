//! Adam optimizer with bias correction.

use super::{ParamSet, Scalar, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, aligned positionally with a
/// [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: params
                .entries()
                .iter()
                .map(|e| vec![T::zero(); e.data.len()])
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|e| vec![T::zero(); e.data.len()])
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One optimizer step:
    /// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
    /// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &ParamSet<T>,
    ) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                context: format!(
                    "adam state {} entries, params {}, grads {}",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        for idx in 0..params.len() {
            if params.data(idx).len() != grads.data(idx).len() {
                return Err(TensorError::ShapeMismatch {
                    context: format!(
                        "adam entry {idx}: {} params vs {} grads",
                        params.data(idx).len(),
                        grads.data(idx).len()
                    ),
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let g = grads.data(idx);
            let p = params.data_mut(idx);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
