//! Rectified Adam.
//!
//! The variance-rectification length `rho_t` gates between plain momentum
//! steps (early, while the second-moment estimate is unreliable) and the
//! rectified adaptive step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, Params};
use crate::datamodel::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Apply weight decay directly to the parameters instead of adding it
    /// to the gradient.
    #[serde(default)]
    pub decoupled: bool,
    /// Rescale the gradient to this global L2 norm when it is longer.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for RadamConfig {
    fn default() -> Self {
        RadamConfig {
            lr: 0.03,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: false,
            max_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

/// Rectification length `rho_t` after `t` steps.
pub fn rho(t: u64, beta2: f64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

impl OptimState {
    pub fn new(params: &Params<f32>) -> Self {
        OptimState {
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn tensor_map(&self, params: &Params<f32>) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, p) in params.tensors.iter().enumerate() {
            let dims: Vec<u64> = p.dims.iter().map(|&d| d as u64).collect();
            out.insert(
                format!("m.{}", p.name),
                Tensor {
                    dims: dims.clone(),
                    data: self.m[i].clone(),
                },
            );
            out.insert(
                format!("v.{}", p.name),
                Tensor {
                    dims,
                    data: self.v[i].clone(),
                },
            );
        }
        out.insert(
            "step".into(),
            Tensor {
                dims: vec![2],
                data: vec![f32::from_bits((self.t >> 32) as u32), f32::from_bits(self.t as u32)],
            },
        );
        out
    }

    pub fn from_tensor_map(params: &Params<f32>, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut state = OptimState::new(params);
        for (i, p) in params.tensors.iter().enumerate() {
            for (key, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let t = map
                    .get(&format!("{key}.{}", p.name))
                    .ok_or_else(|| Error::Contract(format!("optimizer state lacks {key}.{}", p.name)))?;
                if t.data.len() != slot.len() {
                    return Err(Error::Contract(format!("optimizer {key}.{} has wrong size", p.name)));
                }
                slot.copy_from_slice(&t.data);
            }
        }
        let step = map
            .get("step")
            .filter(|t| t.data.len() == 2)
            .ok_or_else(|| Error::Contract("optimizer state lacks step".into()))?;
        state.t = ((step.data[0].to_bits() as u64) << 32) | step.data[1].to_bits() as u64;
        Ok(state)
    }
}

/// One RAdam update of `params` in place.
pub fn radam_step(
    params: &mut Params<f32>,
    grads: &Grads<f32>,
    state: &mut OptimState,
    cfg: &RadamConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(Error::Contract("optimizer buffers do not match parameters".into()));
    }
    for (g, p) in grads.iter().zip(&params.tensors) {
        if g.len() != p.data.len() {
            return Err(Error::Contract(format!("gradient for {} has wrong size", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
        }
    }
    let clip = match cfg.max_grad_norm {
        Some(max) => {
            let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > max { max / norm } else { 1.0 }
        }
        None => 1.0,
    };
    state.t += 1;
    let t = state.t;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho_t = rho(t, b2);
    let rect = (rho_t > 4.0).then(|| {
        (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
    });
    for ((p, g), (m, v)) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.data.len() {
            let theta = p.data[i] as f64;
            let mut gi = g[i] as f64 * clip;
            if !cfg.decoupled {
                gi += cfg.weight_decay * theta;
            }
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bias1;
            let step = match rect {
                Some(r) => r * m_hat / ((vi / bias2).sqrt() + cfg.eps),
                None => m_hat,
            };
            let mut next = theta - cfg.lr * step;
            if cfg.decoupled {
                next -= cfg.lr * cfg.weight_decay * theta;
            }
            p.data[i] = next as f32;
        }
    }
    Ok(())
}
