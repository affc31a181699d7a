//! Adam, applied in unconstrained parameter space.

use super::param::ParamSet;
use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Mat> = params
            .iter()
            .map(|p| Mat::zeros(p.raw.nrows(), p.raw.ncols()))
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One Adam update that *decreases* the loss whose gradients are stored in `params`.
/// Frozen parameters are left untouched.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if state.first.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state has {} slots for {} params", state.first.len(), params.len()),
        ));
    }
    for p in params.iter() {
        if p.trainable && p.grad.is_none() {
            return Err(Error::MissingGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        if !p.trainable {
            continue;
        }
        let g = p.grad.as_ref().expect("checked above");
        for k in 0..g.len() {
            let gk = g.as_slice()[k];
            let mk = b1 * m.as_slice()[k] + (1.0 - b1) * gk;
            let vk = b2 * v.as_slice()[k] + (1.0 - b2) * gk * gk;
            m.as_mut_slice()[k] = mk;
            v.as_mut_slice()[k] = vk;
            let upd = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            p.raw.as_mut_slice()[k] -= upd;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::param::Constraint;

    fn scalar_set(x: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("p", Mat::from_element(1, 1, x), Constraint::None);
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = scalar_set(1.5);
        let mut st = AdamState::new(&ps);
        for p in ps.iter_mut() {
            p.grad = Some(Mat::zeros(1, 1));
        }
        adam_step(&mut ps, &mut st, 0.1).unwrap();
        assert_eq!(ps.iter().next().unwrap().raw[(0, 0)], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut ps = scalar_set(0.0);
        let mut st = AdamState::new(&ps);
        for p in ps.iter_mut() {
            p.grad = Some(Mat::from_element(1, 1, 1.0));
        }
        adam_step(&mut ps, &mut st, 0.1).unwrap();
        let x = ps.iter().next().unwrap().raw[(0, 0)];
        assert!((x + 0.1).abs() < 1e-6, "{x}");
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut ps = scalar_set(0.0);
        let mut st = AdamState::new(&ps);
        for _ in 0..100 {
            for p in ps.iter_mut() {
                let x = p.raw[(0, 0)];
                p.grad = Some(Mat::from_element(1, 1, 2.0 * (x - 2.0)));
            }
            adam_step(&mut ps, &mut st, 0.05).unwrap();
        }
        let x = ps.iter().next().unwrap().raw[(0, 0)];
        assert!((x - 2.0).abs() < 0.05, "{x}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = scalar_set(0.0);
        let mut st = AdamState::new(&ps);
        assert!(matches!(
            adam_step(&mut ps, &mut st, 0.1),
            Err(Error::MissingGradient(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn positive_params_stay_positive(
            init in 1e-3f64..10.0,
            grads in proptest::collection::vec(-50.0f64..50.0, 1..100),
            lr in 1e-4f64..1.0,
        ) {
            let mut ps = ParamSet::new();
            let id = ps.add_positive("s", Mat::from_element(1, 1, init));
            let mut st = AdamState::new(&ps);
            for g in grads {
                for p in ps.iter_mut() {
                    p.grad = Some(Mat::from_element(1, 1, g));
                }
                adam_step(&mut ps, &mut st, lr).unwrap();
                proptest::prop_assert!(ps.value(id)[(0, 0)] > 0.0);
            }
        }
    }
}
