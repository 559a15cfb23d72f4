use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Default Adam learning rate used by both training stages.
pub const DEFAULT_LR: f64 = 1e-4;

/// Adam moments for every tensor of a [`ParamStore`], index-aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of the parameters listed in `grads`.
///
/// Parameters without an entry keep their value and moments.
pub fn adam_step(store: &mut ParamStore, grads: &[(ParamId, &[f64])], state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for &(id, g) in grads {
        let p = store.get_mut(id).data_mut();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
