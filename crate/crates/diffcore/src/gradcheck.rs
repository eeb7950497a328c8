//! Central finite-difference gradient checking.
//!
//! The numeric side only ever reads forward values, so it is independent of
//! every backward rule it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences in 64-bit mode.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Floor for the relative-error denominator so that gradients that are
/// genuinely ~0 are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)` per input.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(NORM_FLOOR)
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences over every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.scalar(out))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        numeric.push(grad);
    }

    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheckReport {
        relative_errors,
        analytic,
        numeric,
    })
}
