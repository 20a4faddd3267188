//! Bias-corrected Adam.

use super::{Scalar, Tensor};

/// First/second moment accumulators for a fixed list of parameter tensors,
/// addressed by position.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional global-norm gradient clip; disabled by default.
    pub clip_global_norm: Option<f64>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'p>(params: impl IntoIterator<Item = &'p Tensor<S>>) -> Self
    where
        S: 'p,
    {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| {
                (
                    Tensor::zeros(p.rows(), p.cols()),
                    Tensor::zeros(p.rows(), p.cols()),
                )
            })
            .unzip();
        Self {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_global_norm: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over parallel lists of parameters and gradients.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state mismatch");

    let clip_scale = state.clip_global_norm.map(|max_norm| {
        let sq: f64 = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&g| g.to_f64() * g.to_f64())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            max_norm / norm
        } else {
            1.0
        }
    });

    state.step += 1;
    let t = state.step;
    let beta1 = S::from_f64(state.beta1);
    let beta2 = S::from_f64(state.beta2);
    let one_m_beta1 = S::from_f64(1.0 - state.beta1);
    let one_m_beta2 = S::from_f64(1.0 - state.beta2);
    let corr1 = S::from_f64(1.0 / (1.0 - state.beta1.powi(t as i32)));
    let corr2 = S::from_f64(1.0 / (1.0 - state.beta2.powi(t as i32)));
    let eps = S::from_f64(state.epsilon);
    let step_size = S::from_f64(lr);
    let clip = S::from_f64(clip_scale.unwrap_or(1.0));

    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        debug_assert_eq!(param.len(), grad.len());
        for ((p, &g0), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            let g = g0 * clip;
            *m = beta1 * *m + one_m_beta1 * g;
            *v = beta2 * *v + one_m_beta2 * g * g;
            let m_hat = *m * corr1;
            let v_hat = *v * corr2;
            *p -= step_size * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
