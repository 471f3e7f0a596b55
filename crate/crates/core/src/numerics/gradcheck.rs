//! Central finite-difference checks against the reverse-mode gradients.

use super::{Bound, Graph, NumericsError, ParamStore, Tensor, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_values: (f64, f64),
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks the gradient of a scalar loss with respect to every trainable
/// parameter of `store`, probing at most `per_param` entries of each.
///
/// `loss` must build the same deterministic (evaluation-mode) computation on
/// each call.
pub fn check_store<F>(
    store: &ParamStore<f64>,
    eps: f64,
    per_param: usize,
    loss: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&ParamStore<f64>, &Graph<f64>, &Bound) -> Result<Var, NumericsError>,
{
    let g = Graph::inference();
    let bound = store.bind(&g);
    let out = loss(store, &g, &bound)?;
    let grads = g.backward(out)?.for_bound(&bound);

    let eval = |s: &ParamStore<f64>| -> Result<f64, NumericsError> {
        let g = Graph::inference();
        let b = s.bind(&g);
        let v = loss(s, &g, &b)?;
        Ok(g.value(v).item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: String::new(),
        worst_values: (0.0, 0.0),
    };
    let mut probe = store.clone();
    for (i, entry) in store.entries().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let n = entry.value.numel();
        let step = (n / per_param.max(1)).max(1);
        let zero = Tensor::zeros(entry.value.shape());
        let analytic = grads[i].as_ref().unwrap_or(&zero);
        let id = store.id(&entry.name)?;
        for k in (0..n).step_by(step).take(per_param) {
            let original = entry.value.data()[k];
            probe.update(id, |t| t.data_mut()[k] = original + eps);
            let plus = eval(&probe)?;
            probe.update(id, |t| t.data_mut()[k] = original - eps);
            let minus = eval(&probe)?;
            probe.update(id, |t| t.data_mut()[k] = original);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.data()[k], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = format!("{}[{k}]", entry.name);
                    report.worst_values = (analytic.data()[k], numeric);
                }
            }
        }
    }
    Ok(report)
}
