use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{flatten, unflatten, ParamTree};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if !ok {
            return Err(Error::Precondition(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new<X: ParamTree<Tensor<f64>>>(cfg: AdamWConfig, params: &X) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Tensor<f64>> = flatten(params).iter().map(Tensor::zeros_like).collect();
        Ok(Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    /// One update; `grads` is the gradient tree matching `params`.
    /// Returns the gradient norm before clipping.
    pub fn step<X: ParamTree<Tensor<f64>>>(&mut self, params: &mut X, grads: &X) -> Result<f64> {
        let mut p = flatten(params);
        let g = flatten(grads);
        if g.len() != p.len() || p.len() != self.m.len() {
            return Err(Error::Precondition(
                "gradient tree does not match parameters".into(),
            ));
        }
        let norm = g
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adamw" });
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in p.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *pi -= c.lr * (update + c.weight_decay * *pi);
            }
        }
        unflatten(params, &p)?;
        Ok(norm)
    }
}
