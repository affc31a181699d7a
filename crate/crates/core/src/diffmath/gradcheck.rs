//! Central finite-difference validation of tape gradients.

use super::param::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Result of a gradient check; `worst` names the parameter entry with the
/// largest relative error.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

fn eval<F>(params: &ParamSet, loss_fn: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    Ok(loss_fn(&tape, &bound)?.item())
}

/// Difference quotient used by [`finite_diff_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    Central,
    /// Richardson extrapolation of central differences at `h` and `2h`,
    /// error `O(h⁴)`; lets a larger `h` keep rounding error small.
    Richardson,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `h` for every trainable scalar. Relative error is
/// `|analytic − numeric| / (|numeric| + 1e-8)`.
///
/// `loss_fn` must be deterministic; any randomness has to come from a fixed seed.
pub fn finite_diff_check<F>(params: &mut ParamSet, h: f64, loss_fn: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_with(params, h, Stencil::Central, loss_fn)
}

/// [`finite_diff_check`] with a choice of difference stencil.
pub fn finite_diff_check_with<F>(
    params: &mut ParamSet,
    h: f64,
    stencil: Stencil,
    loss_fn: F,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = loss_fn(&tape, &bound)?;
        let grads = tape.backward(loss)?;
        params.set_grads(&bound, &grads);
        let base = loss.item();
        if eval(params, &loss_fn)?.to_bits() != base.to_bits() {
            return Err(Error::InvalidArgument(
                "loss function is not deterministic under a fixed seed".into(),
            ));
        }
        params
            .iter()
            .map(|p| p.grad.clone())
            .collect::<Vec<_>>()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<(String, bool, usize)> = params
        .iter()
        .map(|p| (p.name.clone(), p.trainable, p.raw.len()))
        .collect();
    for (pi, (name, trainable, len)) in names.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let g = analytic[pi].as_ref().expect("trainable params have grads");
        for k in 0..len {
            let orig = params.iter().nth(pi).unwrap().raw.as_slice()[k];
            let set = |ps: &mut ParamSet, x: f64| {
                ps.iter_mut().nth(pi).unwrap().raw.as_mut_slice()[k] = x;
            };
            let mut central = |step: f64| -> Result<f64> {
                set(params, orig + step);
                let fp = eval(params, &loss_fn);
                set(params, orig - step);
                let fm = eval(params, &loss_fn);
                set(params, orig);
                Ok((fp? - fm?) / (2.0 * step))
            };
            let numeric = match stencil {
                Stencil::Central => central(h)?,
                Stencil::Richardson => {
                    let d1 = central(h)?;
                    let d2 = central(2.0 * h)?;
                    (4.0 * d1 - d2) / 3.0
                }
            };
            let a = g.as_slice()[k];
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
