use super::param::Parameterized;
use crate::error::{Error, Result};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the gradients accumulated by `loss` against central finite
/// differences `(f(w + eps) - f(w - eps)) / (2 eps)` on every coordinate
/// of every parameter.
///
/// `loss` must evaluate the objective and accumulate its gradient into the
/// model's parameters. Parameter values are restored exactly afterwards and
/// gradients are left zeroed.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, eps: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    model.zero_grad();
    loss(model)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .into_iter()
        .map(|p| (p.name, p.grad.iter().copied().collect()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (k, (name, grads)) in analytic.iter().enumerate() {
        for (idx, &a) in grads.iter().enumerate() {
            let original = nudge(model, k, idx, None);
            nudge(model, k, idx, Some(original + eps));
            let plus = loss(model)?;
            nudge(model, k, idx, Some(original - eps));
            let minus = loss(model)?;
            nudge(model, k, idx, Some(original));

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    model.zero_grad();
    Ok(report)
}

/// Returns the current value of coordinate `idx` of parameter `k`, setting
/// it to `value` first when given.
fn nudge<M: Parameterized>(model: &mut M, k: usize, idx: usize, value: Option<f64>) -> f64 {
    let mut params = model.params_mut();
    let slot = params[k]
        .value
        .iter_mut()
        .nth(idx)
        .expect("coordinate within parameter");
    if let Some(v) = value {
        *slot = v;
    }
    *slot
}
