//! Finite-difference verification of tape gradients.

use crate::error::NumericError;
use crate::numerics::tape::{ParamSet, Tape, VarId};

/// Outcome of a finite-difference check: per-parameter maximum relative
/// error between analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub per_param: Vec<(String, f64)>,
    pub eps: f64,
    /// True when the base forward pass evaluated a nondifferentiable
    /// point exactly (|x| or relu at 0, elementwise-max tie).
    pub kink_detected: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(params: &ParamSet, build: &F) -> Result<f64, NumericError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<VarId, NumericError>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    tape.value(root).item()
}

/// Compare analytic gradients of `build`'s scalar output against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every trainable
/// parameter coordinate. Relative error uses a `max(|a|, |n|, 1e-12)`
/// denominator; non-finite differences are reported as infinite error.
pub fn grad_check<F>(
    params: &mut ParamSet,
    eps: f64,
    build: F,
) -> Result<GradReport, NumericError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<VarId, NumericError>,
{
    assert!(eps > 0.0, "grad_check needs a positive step");

    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let kink_detected = tape.kink_events() > 0;
    let grads = tape.backward(root)?;

    let ids: Vec<usize> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();

    let mut per_param = Vec::with_capacity(ids.len());
    for pid in ids {
        let name = params.get(pid).name.clone();
        let n_coords = params.get(pid).value.len();
        let analytic = grads.get(pid).cloned();
        let mut max_rel: f64 = 0.0;
        for i in 0..n_coords {
            let orig = params.get(pid).value.data()[i];

            params.get_mut(pid).value.data_mut()[i] = orig + eps;
            let f_plus = eval_scalar(params, &build);
            params.get_mut(pid).value.data_mut()[i] = orig - eps;
            let f_minus = eval_scalar(params, &build);
            params.get_mut(pid).value.data_mut()[i] = orig;

            let numeric = match (f_plus, f_minus) {
                (Ok(p), Ok(m)) => (p - m) / (2.0 * eps),
                _ => f64::NAN,
            };
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            let rel = if !numeric.is_finite() || !a.is_finite() {
                f64::INFINITY
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12)
            };
            max_rel = max_rel.max(rel);
        }
        per_param.push((name, max_rel));
    }

    Ok(GradReport {
        per_param,
        eps,
        kink_detected,
    })
}
