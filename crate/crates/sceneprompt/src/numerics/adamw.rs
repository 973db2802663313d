//! AdamW: Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::param::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Value(format!("invalid AdamW hyperparameters: {self:?}")))
        }
    }
}

/// First/second moment accumulators keyed by parameter name.
pub struct AdamWState {
    pub cfg: AdamWConfig,
    step: u64,
    m: HashMap<String, DenseArray>,
    v: HashMap<String, DenseArray>,
}

impl AdamWState {
    /// Allocates zero moments for every trainable parameter.
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for p in params.iter().filter(|p| p.trainable) {
            m.insert(p.name.clone(), DenseArray::zeros(p.value.shape().to_vec()));
            v.insert(p.name.clone(), DenseArray::zeros(p.value.shape().to_vec()));
        }
        Ok(AdamWState {
            cfg,
            step: 0,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update over all trainable
    /// parameters. Gradients are left intact for inspection; the caller
    /// resets them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let m = self
                .m
                .get_mut(&p.name)
                .ok_or_else(|| Error::State(format!("no AdamW state for '{}'", p.name)))?;
            let v = self
                .v
                .get_mut(&p.name)
                .ok_or_else(|| Error::State(format!("no AdamW state for '{}'", p.name)))?;
            let g = p.grad.as_slice();
            let mv = m.as_mut_slice();
            let vv = v.as_mut_slice();
            let xs = p.value.as_mut_slice();
            for i in 0..xs.len() {
                mv[i] = c.beta1 * mv[i] + (1.0 - c.beta1) * g[i];
                vv[i] = c.beta2 * vv[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = mv[i] / bc1;
                let v_hat = vv[i] / bc2;
                xs[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * xs[i]);
            }
            p.value.check_finite(&p.name)?;
        }
        Ok(())
    }
}
