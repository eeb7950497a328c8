use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / g` when their global norm `g`
/// exceeds `max_norm`. Returns the factor applied (1.0 when unchanged).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        g.scale_in_place(factor);
    }
    factor
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_constants(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }

    /// Applies one update to every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let param = params.tensor_mut(ParamId::from_index(i));
            if param.shape() != grad.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
