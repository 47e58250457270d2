use super::params::{Param, ParamStore};
use super::{Result, TensorError};

/// Adam hyperparameters. Defaults follow the training setup used throughout
/// this project: beta1=0.9, beta2=0.99.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; first/second moments are kept per parameter in
/// store order so they serialize alongside the weights.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Adam {
            hyper,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over every parameter; `lr_for` resolves the per-parameter
    /// learning rate (the visual extractor trains at a lower rate than the
    /// rest). Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr_for: impl Fn(&Param) -> f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        for (idx, (_, p)) in store.iter_mut().enumerate() {
            let grad = p.grad.as_deref().ok_or_else(|| TensorError::MissingGrad {
                name: p.name.clone(),
            })?;
            let lr = lr_for(p);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for e in 0..grad.len() {
                m[e] = b1 * m[e] + (1.0 - b1) * grad[e];
                v[e] = b2 * v[e] + (1.0 - b2) * grad[e] * grad[e];
                let m_hat = m[e] / bias1;
                let v_hat = v[e] / bias2;
                p.data[e] -= lr * m_hat / (v_hat.sqrt() + self.hyper.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self, idx: usize) -> (&[f64], &[f64]) {
        (&self.m[idx], &self.v[idx])
    }

    /// Rebuild optimizer state from serialized moments (checkpoint restore).
    pub fn from_state(hyper: AdamHyper, step_count: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Adam {
            hyper,
            step_count,
            m,
            v,
        }
    }
}
