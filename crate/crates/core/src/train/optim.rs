use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
    Cosine,
}

/// Learning rate for the update at (0-based) `step`: linear warmup from 0 to
/// `peak` over `warmup` steps, then decay to 0 at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64, schedule: Schedule) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let remaining = (total - step) as f64 / (total - warmup) as f64;
    match schedule {
        Schedule::Linear => peak * remaining,
        Schedule::Cosine => peak * 0.5 * (1.0 - (std::f64::consts::PI * remaining).cos()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay over a fixed, named parameter set.
#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    params: Vec<(String, Var)>,
    moments: HashMap<String, (Tensor, Tensor)>,
    t: usize,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let mut moments = HashMap::new();
        for (name, var) in &params {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(Self {
            config,
            params,
            moments,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Global L2 norm of the gradients of the managed parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update; gradients are rescaled so their global norm is at
    /// most `clip` when given. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.t });
        }
        let scale = match clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            let (m, v) = self.moments.get(name).expect("moments exist for every parameter");
            let m = ((m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let theta = var.as_tensor();
            let next = ((theta * (1.0 - lr * weight_decay))? - (update * lr)?)?;
            var.set(&next.detach())?;
            // detached so the moments do not chain every step's graph together
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(norm)
    }

    /// Moment tensors keyed `optim/m/<name>` and `optim/v/<name>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("optim/m/{name}"), m.clone());
            out.insert(format!("optim/v/{name}"), v.clone());
        }
        out
    }

    /// Restores moments written by [`state_tensors`](Self::state_tensors).
    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, t: usize) -> Result<()> {
        for (name, var) in &self.params {
            let get = |kind: &str| -> Result<Tensor> {
                let key = format!("optim/{kind}/{name}");
                let t = tensors.get(&key).ok_or_else(|| Error::CheckpointMismatch {
                    tensor: key.clone(),
                    reason: "missing optimizer state".into(),
                })?;
                Ok(t.to_dtype(var.dtype())?.to_device(var.device())?)
            };
            self.moments.insert(name.clone(), (get("m")?, get("v")?));
        }
        self.t = t;
        Ok(())
    }
}
