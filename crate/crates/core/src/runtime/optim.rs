use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::graph::ParamId;
use super::params::ParamStore;
use super::RuntimeError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for every tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub base_lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, base_lr: f64, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self {
            config,
            base_lr,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters absent from `grads` are
    /// treated as having zero gradient.
    ///
    /// A non-finite gradient anywhere aborts the whole step before any state
    /// is touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<ParamId, Vec<f64>>,
        lr: f64,
    ) -> Result<(), RuntimeError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(RuntimeError::InvalidArgument(format!("learning rate {lr}")));
        }
        if self.first.len() != params.len() {
            return Err(RuntimeError::InvalidArgument(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (id, g) in grads {
            if id.0 >= params.len() || g.len() != params.get(*id).len() {
                return Err(RuntimeError::InvalidArgument(format!("gradient shape for parameter {}", id.0)));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(RuntimeError::NonFiniteGradient(params.name(*id).to_string()));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(&id);
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for `epoch` in `[0, total_epochs)`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64, RuntimeError> {
    if total_epochs == 0 {
        return Err(RuntimeError::InvalidArgument("total_epochs must be positive".into()));
    }
    if epoch >= total_epochs {
        return Err(RuntimeError::InvalidArgument(format!(
            "epoch {epoch} outside [0, {total_epochs})"
        )));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}
