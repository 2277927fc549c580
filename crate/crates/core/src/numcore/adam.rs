use crate::error::Result;
use crate::numcore::ParamStore;

/// Moment estimates for Adam, one tensor per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState) -> Result<()> {
    params.ensure_aligned(grads)?;
    params.ensure_aligned(&state.m)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = p.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for (i, gi) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
