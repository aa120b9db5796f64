use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every learnable tensor, plus the
/// shared step counter used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros = || {
            params
                .learnable()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect()
        };
        AdamState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Checks that the moments mirror the parameter shapes one to one.
    pub fn check_against(&self, params: &Parameters) -> Result<()> {
        let n = params.learnable().count();
        if self.first.len() != n || self.second.len() != n {
            return Err(Error::SpecMismatch(format!(
                "optimizer holds {}/{} moments for {n} parameters",
                self.first.len(),
                self.second.len()
            )));
        }
        for (name, p) in params.learnable() {
            for m in [&self.first, &self.second] {
                match m.get(name) {
                    Some(t) if t.shape() == p.shape() => {}
                    _ => {
                        return Err(Error::SpecMismatch(format!(
                            "optimizer moment for {name} missing or misshapen"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam step. Parameters absent from `grads` are
    /// treated as having zero gradient.
    pub fn update(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = (1.0 - (cfg.beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (cfg.beta2 as f64).powi(t)) as f32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (name, p) in params.learnable_mut() {
            let m = self.first.get_mut(name).expect("moment for every parameter");
            let v = self.second.get_mut(name).expect("moment for every parameter");
            let g = grads.get(name).map(|t| t.data());
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
    }
}
