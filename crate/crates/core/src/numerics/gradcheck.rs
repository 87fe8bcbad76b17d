//! Central-difference certification of analytic gradients.

use rand::Rng;
use thiserror::Error;

use super::tensor::Parameter;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("non-finite value while probing parameter {param} coordinate {coord}")]
    NonFinite { param: usize, coord: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Compares the gradients that `f` accumulates into `params` against central
/// differences of its return value at every coordinate.
///
/// `f` must add `d f / d param` into each `Parameter::grad`; the checker
/// zeroes the accumulators before every call. Returns the maximum of
/// `|analytic − numeric| / max(1, |numeric|)`. On return the parameter values
/// are unchanged and the gradients hold the analytic values at the point.
pub fn finite_difference_check<F>(
    f: F,
    params: &mut [Parameter],
    step: f64,
) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut [Parameter]) -> f64,
{
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.value.len()).collect()).collect();
    check_coords(f, params, step, &coords)
}

/// Like [`finite_difference_check`] but probes at most `per_param` randomly
/// chosen coordinates of each parameter.
pub fn finite_difference_check_sampled<F, R>(
    f: F,
    params: &mut [Parameter],
    step: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut [Parameter]) -> f64,
    R: Rng,
{
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let n = p.value.len();
            if n <= per_param {
                (0..n).collect()
            } else {
                rand::seq::index::sample(rng, n, per_param).into_vec()
            }
        })
        .collect();
    check_coords(f, params, step, &coords)
}

fn check_coords<F>(
    mut f: F,
    params: &mut [Parameter],
    step: f64,
    coords: &[Vec<usize>],
) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut [Parameter]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(GradCheckError::BadStep(step));
    }
    params.iter_mut().for_each(Parameter::zero_grad);
    let base = f(params);
    if !base.is_finite() {
        return Err(GradCheckError::NonFinite { param: 0, coord: 0 });
    }
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
    for (pi, g) in analytic.iter().enumerate() {
        if let Some(ci) = g.iter().position(|v| !v.is_finite()) {
            return Err(GradCheckError::NonFinite { param: pi, coord: ci });
        }
    }

    let mut worst: f64 = 0.0;
    for (pi, cs) in coords.iter().enumerate() {
        for &ci in cs {
            let orig = params[pi].value.data()[ci];
            params[pi].value.data_mut()[ci] = orig + step;
            params.iter_mut().for_each(Parameter::zero_grad);
            let plus = f(params);
            params[pi].value.data_mut()[ci] = orig - step;
            params.iter_mut().for_each(Parameter::zero_grad);
            let minus = f(params);
            params[pi].value.data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFinite { param: pi, coord: ci });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[pi][ci] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }

    for (p, g) in params.iter_mut().zip(&analytic) {
        p.grad.data_mut().copy_from_slice(g);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut ps = vec![Parameter::new("x", Tensor::scalar(3.0))];
        let err = finite_difference_check(
            |p| {
                let x = p[0].value.data()[0];
                p[0].grad.data_mut()[0] += 2.0 * x;
                x * x
            },
            &mut ps,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
        assert_eq!(ps[0].grad.data()[0], 6.0);
        assert_eq!(ps[0].value.data()[0], 3.0);
    }

    #[test]
    fn constant_function() {
        let mut ps = vec![Parameter::new("x", Tensor::vector(vec![1.0, -2.0]))];
        let err = finite_difference_check(|_| 4.2, &mut ps, DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut ps = vec![Parameter::new("x", Tensor::scalar(3.0))];
        let err = finite_difference_check(
            |p| {
                let x = p[0].value.data()[0];
                p[0].grad.data_mut()[0] += x; // off by a factor of two
                x * x
            },
            &mut ps,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_reports_parameter() {
        let mut ps = vec![
            Parameter::new("a", Tensor::scalar(1.0)),
            Parameter::new("b", Tensor::scalar(0.0)),
        ];
        let res = finite_difference_check(
            |p| {
                let b = p[1].value.data()[0];
                if b > 0.0 {
                    f64::NAN
                } else {
                    b
                }
            },
            &mut ps,
            DEFAULT_STEP,
        );
        assert_eq!(res, Err(GradCheckError::NonFinite { param: 1, coord: 0 }));
    }
}
