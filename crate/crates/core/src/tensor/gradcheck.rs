use super::Tensor;
use crate::error::{Error, Result};

/// Lower bound on the denominator of the relative error, so coordinates whose
/// true gradient is (numerically) zero are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest input accepted by [`grad_check`].
pub const GRAD_CHECK_MAX_ELEMENTS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

impl GradCheckReport {
    pub(crate) fn new(tol: f64) -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            checked: 0,
            tol,
            passed: true,
        }
    }

    pub(crate) fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let rel = rel_err(analytic, numeric);
        if rel > self.max_rel_err || self.checked == 0 {
            self.max_rel_err = rel;
            self.worst_index = index;
        }
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        self.checked += 1;
        self.passed = self.max_rel_err < self.tol;
    }
}

/// Compares the reverse-mode gradient of the scalar function `f` at `input`
/// with central differences of step `h`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if input.numel() > GRAD_CHECK_MAX_ELEMENTS {
        return Err(Error::Usage(format!(
            "grad_check input has {} elements (limit {GRAD_CHECK_MAX_ELEMENTS})",
            input.numel()
        )));
    }
    let x = input.requires_grad();
    f(&x)?.backward()?;
    let analytic = x.grad().expect("leaf requires grad");

    let shape = input.shape().to_vec();
    let mut values = input.to_vec();
    let eval = |values: &[f64]| -> Result<f64> { f(&Tensor::new(&shape, values.to_vec())?)?.item() };
    let mut report = GradCheckReport::new(tol);
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = eval(&values)?;
        values[i] = orig - h;
        let down = eval(&values)?;
        values[i] = orig;
        report.record(i, analytic[i], (up - down) / (2.0 * h));
    }
    Ok(report)
}
