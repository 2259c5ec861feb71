//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per parameter tensor, evenly strided.
    pub per_param_limit: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            per_param_limit: None,
        }
    }
}

/// Checks every parameter with default options.
///
/// `loss(ps, accumulate)` must return the scalar loss for the current parameter
/// values and, when `accumulate` is true, add its analytic gradient into the
/// accumulators of `ps`.
pub fn grad_check<F>(ps: &mut ParameterSet, loss: F) -> GradCheckReport
where
    F: FnMut(&mut ParameterSet, bool) -> f64,
{
    grad_check_with(ps, loss, &GradCheckOptions::default())
}

pub fn grad_check_with<F>(ps: &mut ParameterSet, mut loss: F, options: &GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&mut ParameterSet, bool) -> f64,
{
    ps.zero_grad();
    loss(ps, true);
    let analytic: Vec<Tensor> = ps.iter().map(|p| p.grad.clone()).collect();
    ps.zero_grad();
    let names: Vec<String> = ps.iter().map(|p| p.name.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: None,
        checked: 0,
        tolerance: options.tolerance,
        passed: true,
    };
    for (pi, name) in names.iter().enumerate() {
        let id = ps.find(name).expect("parameter exists");
        let len = analytic[pi].len();
        let stride = match options.per_param_limit {
            Some(limit) if limit > 0 && len > limit => len.div_ceil(limit),
            _ => 1,
        };
        for i in (0..len).step_by(stride) {
            let original = ps.value(id).data()[i];
            ps.value_mut(id).data_mut()[i] = original + options.step;
            let plus = loss(ps, false);
            ps.value_mut(id).data_mut()[i] = original - options.step;
            let minus = loss(ps, false);
            ps.value_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * options.step);
            let err = relative_error(analytic[pi].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = Some(name.clone());
                report.worst_index = Some(i);
            }
        }
    }
    report.passed = report.max_rel_error < options.tolerance;
    report
}

/// Max relative error between `analytic` (the claimed `df/dx`) and central
/// differences of `f` around `x`.
pub fn input_grad_check<F>(x: &Tensor, analytic: &Tensor, mut f: F) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let original = x.data()[i];
        probe.data_mut()[i] = original + DEFAULT_STEP;
        let plus = f(&probe);
        probe.data_mut()[i] = original - DEFAULT_STEP;
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
        let err = relative_error(analytic.data()[i], numeric);
        if err > worst || err.is_nan() {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{mse, Linear};
    use crate::rng::SeedStream;

    fn linear_regression() -> (ParameterSet, Linear, Tensor, Vec<f64>) {
        let mut ps = ParameterSet::new();
        let mut rng = SeedStream::new(1).rng();
        let lin = Linear::new(&mut ps, "fit", 3, 1, &mut rng);
        ps.value_mut(lin.bias).data_mut()[0] = 0.3;
        let x = Tensor::from_vec(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = vec![0.5, -1.0, 2.0, 0.1];
        (ps, lin, x, y)
    }

    #[test]
    fn linear_model_is_exact() {
        let (mut ps, lin, x, y) = linear_regression();
        let report = grad_check(&mut ps, |ps, acc| {
            let pred = lin.forward(ps, &x);
            let (loss, g) = mse(pred.data(), &y);
            if acc {
                lin.backward(ps, &x, &Tensor::from_vec(&[4, 1], g).unwrap());
            }
            loss
        });
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (mut ps, lin, x, y) = linear_regression();
        let report = grad_check(&mut ps, |ps, acc| {
            let pred = lin.forward(ps, &x);
            let (loss, g) = mse(pred.data(), &y);
            if acc {
                lin.backward(ps, &x, &Tensor::from_vec(&[4, 1], g).unwrap());
                ps.grad_mut(lin.weight).data_mut()[1] *= 1.01;
            }
            loss
        });
        assert!(!report.passed);
        assert_eq!(report.worst_param.as_deref(), Some("fit.weight"));
        assert_eq!(report.worst_index, Some(1));
    }

    #[test]
    fn parameters_are_restored() {
        let (mut ps, lin, x, y) = linear_regression();
        let before: Vec<Tensor> = ps.iter().map(|p| p.value.clone()).collect();
        grad_check(&mut ps, |ps, _| mse(lin.forward(ps, &x).data(), &y).0);
        let after: Vec<Tensor> = ps.iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }
}
