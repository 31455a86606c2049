//! Central-difference gradient verification in 64-bit precision.

use super::{no_grad, Tensor, TensorError, TensorResult};

/// One-sided slopes disagreeing by more than this (relative) mark a point
/// where the function is not differentiable (relu at 0, maxpool ties).
const KINK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked elements of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter index, element index)` of points skipped as non-differentiable.
    pub excluded: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.excluded.extend_from_slice(&other.excluded);
    }

    pub fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            excluded: Vec::new(),
        }
    }
}

/// Compares the backward pass of the scalar function `f` with central
/// differences over every element of every tensor in `params`.
///
/// `f` is re-evaluated with individual elements of `params` perturbed in
/// place, so it must read them through the same handles.
pub fn grad_check_params<F, E>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn() -> Result<Tensor<f64>, E>,
    E: From<TensorError>,
{
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let eval = || -> Result<f64, E> { no_grad(|| f().map(|y| y.item())) };
    let base = eval()?;
    let mut report = GradCheckReport::empty();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + eps;
            let plus = eval()?;
            p.data_mut()[i] = orig - eps;
            let minus = eval()?;
            p.data_mut()[i] = orig;

            let central = (plus - minus) / (2.0 * eps);
            let forward = (plus - base) / eps;
            let backward = (base - minus) / eps;
            if (forward - backward).abs() > KINK_TOLERANCE * central.abs().max(1.0) {
                report.excluded.push((pi, i));
                continue;
            }
            let a = analytic[pi][i];
            let err = (a - central).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_params`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> TensorResult<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> TensorResult<Tensor<f64>>,
{
    grad_check_params(|| f(x), std::slice::from_ref(x), eps)
}
