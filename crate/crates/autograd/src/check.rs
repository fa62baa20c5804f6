//! Central finite-difference gradient checking against the tape.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for relative error, so entries whose true gradient is
/// numerically zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Perturbs each entry of the listed parameters by `+-step` and compares
/// the central difference of `loss` with `analytic`. `max_per_param` caps
/// how many entries of each tensor are probed (evenly strided).
pub fn check_params(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    analytic: &Grads<f64>,
    step: f64,
    max_per_param: usize,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for &id in ids {
        let n = store.get(id).len();
        let stride = (n / max_per_param.max(1)).max(1);
        let zero = Tensor::zeros(store.get(id).rows(), store.get(id).cols());
        let a = analytic.get(id).unwrap_or(&zero).clone();
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let lp = loss(store);
            store.get_mut(id).data_mut()[k] = orig - step;
            let lm = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let err = relative_error(a.data()[k], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k, a.data()[k], numeric));
            }
        }
    }
    report
}

/// Finite-difference gradient of `f` with respect to a free tensor.
pub fn numeric_grad(x: &Tensor<f64>, step: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let lp = f(&probe);
        probe.data_mut()[k] = orig - step;
        let lm = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (lp - lm) / (2.0 * step);
    }
    out
}
