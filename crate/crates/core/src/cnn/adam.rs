use super::{ModelParams, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(OptimizerState {
            m: ModelParams::zeros(dim)?,
            v: ModelParams::zeros(dim)?,
            t: 0,
        })
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if the
/// update would produce a non-finite value.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.dim != params.dim || state.m.dim != params.dim {
        return Err(Error::ShapeMismatch("optimizer shapes differ from parameters".into()));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (ib1, ib2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step = T::from_f64(cfg.learning_rate / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.epsilon);

    let mut updated = params.clone();
    let mut m_new = state.m.clone();
    let mut v_new = state.v.clone();
    let targets = updated.tensors_mut().into_iter().zip(m_new.tensors_mut()).zip(v_new.tensors_mut());
    for (((p, m), v), g) in targets.zip(grads.tensors()) {
        if g.data.len() != p.data.len() {
            return Err(Error::ShapeMismatch("gradient tensor size".into()));
        }
        for (((pv, mv), vv), &gv) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(&g.data) {
            *mv = b1 * *mv + ib1 * gv;
            *vv = b2 * *vv + ib2 * gv * gv;
            *pv = *pv - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
        }
    }
    if !updated.all_finite() || !m_new.all_finite() || !v_new.all_finite() {
        return Err(Error::NonFinite("adam update"));
    }
    *params = updated;
    state.m = m_new;
    state.v = v_new;
    state.t = t;
    Ok(())
}
