use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters with the inverse-square-root warmup schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    /// Multiplier on the warmup schedule (bundles the model-size factor).
    pub base_scale: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            base_scale: 1.0,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Learning rate at `step` (1-based): `base_scale · min(t⁻⁰·⁵, t·warmup⁻¹·⁵)`.
///
/// Rises linearly over the warmup, peaks at `base_scale·warmup⁻⁰·⁵`, then
/// decays as t⁻⁰·⁵. Step 0 has no defined rate — the counter increments
/// before the first update.
pub fn learning_rate(cfg: &AdamConfig, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage(
            "learning rate is defined for steps >= 1; the step counter increments before each update"
                .into(),
        ));
    }
    if cfg.warmup_steps == 0 {
        return Err(Error::Config {
            field: "warmup_steps",
            detail: "must be at least 1".into(),
        });
    }
    let t = step as f64;
    let w = cfg.warmup_steps as f64;
    Ok(cfg.base_scale * t.powf(-0.5).min(t * w.powf(-1.5)))
}

/// Adam state: first/second moment per parameter, indexed in store order.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Adam {
        let m = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { cfg, m, v, step: 0 }
    }

    /// Rebuild from checkpointed moments; shapes must match the store.
    pub fn restore(
        cfg: AdamConfig,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        step: u64,
        store: &ParamStore,
    ) -> Result<Adam> {
        if m.len() != store.n_params() || v.len() != store.n_params() {
            return Err(Error::InvalidInput(format!(
                "optimizer state covers {} parameters, model has {}",
                m.len(),
                store.n_params()
            )));
        }
        for (i, p) in store.params().iter().enumerate() {
            if m[i].shape() != p.value.shape() || v[i].shape() != p.value.shape() {
                return Err(Error::InvalidInput(format!(
                    "optimizer moment shape differs from parameter `{}`",
                    p.name
                )));
            }
        }
        Ok(Adam { cfg, m, v, step })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Apply one update from the gradients accumulated in `store`, with bias
    /// correction. Increments the step counter first, so the schedule starts
    /// at step 1. Returns the learning rate that was applied.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        self.step += 1;
        let lr = learning_rate(&self.cfg, self.step)?;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((pv, g), (mv, vv)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * g;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(lr)
    }
}
