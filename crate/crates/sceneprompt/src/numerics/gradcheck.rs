//! Central finite-difference gradient verification.
//!
//! The whole test suite leans on this oracle: any loss expressible as a
//! closure over a `ParamSet` can be checked against `(f(x+h) - f(x-h)) / 2h`
//! element by element. The closure must populate analytic gradients via
//! the tape and must be deterministic (frozen noise, frozen subsets).

use crate::error::{Error, Result};
use crate::numerics::param::ParamSet;

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat element index where the worst error occurred.
    pub worst_index: usize,
}

/// Outcome of a full gradient check over a parameter set.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub pass: bool,
    pub step: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor of 1e-8 in the denominator.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Verifies analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` is called with zeroed gradients; it must run a forward and
/// backward pass, accumulate gradients into the set, and return the
/// loss value. The step per element is `step * max(1, |x|)`.
pub fn grad_check<F>(
    params: &mut ParamSet,
    loss_fn: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut ParamSet) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Value(format!("grad_check step must be > 0, got {step}")));
    }

    params.zero_grads();
    let loss0 = loss_fn(params)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.grad.as_slice().to_vec()))
        .collect();

    params.zero_grads();
    let loss1 = loss_fn(params)?;
    if loss0.to_bits() != loss1.to_bits() {
        return Err(Error::Determinism(format!(
            "loss evaluated twice at identical inputs: {loss0:e} vs {loss1:e}"
        )));
    }

    let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
    let mut per_param = Vec::with_capacity(names.len());
    for (name, grad) in &analytic {
        let len = params.get(name)?.value.len();
        let mut max_rel = 0.0;
        let mut worst = 0;
        for i in 0..len {
            let x0 = params.get(name)?.value.as_slice()[i];

            // Central differences carry cancellation noise of order
            // eps * |f| / 2h. Gradients buried below that level count
            // as the zero the oracle observes, and elements failing at
            // the base step get retries at 10x and 100x the step, where
            // the noise shrinks accordingly. A wrong gradient fails at
            // every rung.
            let base = step * x0.abs().max(1.0);
            let mut rel = f64::INFINITY;
            for h in [base, 10.0 * base, 100.0 * base] {
                params.get_mut(name)?.value.as_mut_slice()[i] = x0 + h;
                params.zero_grads();
                let f_plus = loss_fn(params)?;
                params.get_mut(name)?.value.as_mut_slice()[i] = x0 - h;
                params.zero_grads();
                let f_minus = loss_fn(params)?;
                params.get_mut(name)?.value.as_mut_slice()[i] = x0;

                let fd = (f_plus - f_minus) / (2.0 * h);
                let noise =
                    f64::EPSILON * f_plus.abs().max(f_minus.abs()).max(1.0) / (2.0 * h);
                let r = if grad[i].abs() <= 1024.0 * noise && fd.abs() <= 1024.0 * noise {
                    0.0
                } else {
                    rel_err(grad[i], fd)
                };
                rel = rel.min(r);
                if rel < tol {
                    break;
                }
            }
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            worst_index: worst,
        });
    }

    // Leave the set holding the analytic gradients we verified.
    params.zero_grads();
    for (name, grad) in &analytic {
        let p = params.get_mut(name)?;
        p.grad.as_mut_slice().copy_from_slice(grad);
    }

    let pass = per_param.iter().all(|p| p.max_rel_err < tol);
    Ok(GradCheckReport {
        per_param,
        pass,
        step,
        tol,
    })
}

/// Default finite-difference step used across the crate.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Default relative tolerance for gradient checks.
pub const DEFAULT_FD_TOL: f64 = 1e-4;
