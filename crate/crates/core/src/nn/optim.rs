//! Adam with bias correction, keyed by parameter name.

use indexmap::IndexMap;

use super::{NnError, ParamSet, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, first: IndexMap::new(), second: IndexMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Apply one update. Parameters without a gradient entry are untouched
    /// (their moments are not advanced either). Gradient shapes must match
    /// their parameters.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) -> Result<(), NnError> {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, value) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != value.shape() {
                return Err(NnError::ShapeMismatch {
                    expected: format!("gradient of shape {:?} for {name}", value.shape()),
                    got: format!("{:?}", grad.shape()),
                });
            }
            let n = value.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = value.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
