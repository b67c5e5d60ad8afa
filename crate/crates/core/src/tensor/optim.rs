use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update of `param` in place.
pub fn adamw_step<T: Scalar>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::dim(
            "adamw_step",
            format!(
                "{name}: param {} grad {} state {}",
                param.len(),
                grad.len(),
                state.m.len()
            ),
        ));
    }
    if let Some(i) = grad.iter().position(|g| g.is_nan()) {
        return Err(Error::Numeric(format!("NaN gradient in {name}[{i}]")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let lr = T::lit(cfg.lr);
    let decay = T::one() - lr * T::lit(cfg.weight_decay);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let eps = T::lit(cfg.eps);
    if cfg.lr == 0.0 {
        // moments still advance; values stay bit-identical
        for ((m, v), &g) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grad) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
        }
        return Ok(());
    }
    for ((p, (m, v)), &g) in param
        .iter_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .zip(grad)
    {
        *p *= decay;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over the trainable parameters of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    state: HashMap<ParamId, AdamWState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Updates every parameter that requires grad and holds one. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let st = self
                .state
                .entry(id)
                .or_insert_with(|| AdamWState::new(p.value.numel()));
            let grad: &Tensor<T> = grad;
            let grad = grad.data().to_vec();
            adamw_step(&p.name, p.value.data_mut(), &grad, st, &self.config)?;
        }
        Ok(())
    }
}
