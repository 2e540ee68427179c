use crate::error::{Error, Result};
use crate::numeric::ParamSet;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients with fourth-order central differences on every
/// scalar of every entry.
///
/// `loss_fn` must zero and then populate the gradients of the set it is given,
/// and return the loss. The relative error of one scalar is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut loss_fn: F, params: &ParamSet, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet) -> Result<f64>,
{
    let mut analytic = params.clone();
    let first = loss_fn(&mut analytic)?;
    let mut again = params.clone();
    let second = loss_fn(&mut again)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.value(name).data().len();
        for idx in 0..n {
            let orig = params.value(name).data()[idx];
            let mut at = |x: f64| -> Result<f64> {
                work.value_mut(name).data_mut()[idx] = x;
                loss_fn(&mut work)
            };
            let (p1, m1) = (at(orig + h)?, at(orig - h)?);
            let (p2, m2) = (at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
            work.value_mut(name).data_mut()[idx] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic.grad(name).data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
