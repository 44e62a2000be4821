//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter for one
/// optimized module. Moment order follows the module's canonical parameter
/// order.
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, param_shapes: &[usize]) -> Self {
        let moments = param_shapes
            .iter()
            .map(|&n| (vec![0.0; n], vec![0.0; n]))
            .collect();
        AdamW {
            config,
            step: 0,
            moments,
        }
    }

    /// Creates optimizer state sized for the given parameter list.
    pub fn for_params(config: AdamWConfig, params: &[(String, &Tensor)]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        AdamW::new(config, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a parameter list and matching gradient list. Decay is
    /// decoupled: weights shrink by `lr * weight_decay` directly, outside the
    /// moment estimates.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Tensor],
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer state for {} parameters, got {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (((name, param), grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.moments.iter_mut())
        {
            if grad.numel() != param.numel() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter {} shape {:?}",
                    grad.shape(),
                    name,
                    param.shape()
                )));
            }
            if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {name} at flat index {i}"
                )));
            }
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                data[i] *= 1.0 - c.lr * c.weight_decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
