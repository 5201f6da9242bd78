//! Central finite differences, used as the oracle for [`crate::autodiff`].

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("objective returned a non-finite value at coordinate {0}")]
    NonFinite(usize),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}

/// The step rule `h = 1e-3 * (1 + |theta|)`.
pub fn default_step<T: Scalar>(theta: T) -> T {
    T::lit(1e-3) * (T::one() + theta.abs())
}

/// Central-difference gradient of `f` at `theta`, every coordinate.
pub fn central_difference<T, F>(f: F, theta: &[T], step: impl Fn(T) -> T) -> Result<Vec<T>, GradCheckError>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    central_difference_at(f, theta, &coords, step)
}

/// Central-difference partial derivatives for the listed coordinates only.
pub fn central_difference_at<T, F>(
    mut f: F,
    theta: &[T],
    coords: &[usize],
    step: impl Fn(T) -> T,
) -> Result<Vec<T>, GradCheckError>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = point[i];
        let h = step(orig);
        if !(h > T::zero()) {
            return Err(GradCheckError::BadStep(h.to_f64().unwrap_or(f64::NAN)));
        }
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinite(i));
        }
        // the realised step may differ from h after rounding
        let span = (orig + h) - (orig - h);
        out.push((plus - minus) / span);
    }
    Ok(out)
}

/// Like [`central_difference_at`], but `f` also reports an activation pattern
/// (e.g. [`crate::Graph::relu_pattern`]). A coordinate whose two probes see
/// different patterns straddles a kink, and its estimate comes back `None`.
pub fn central_difference_smooth_at<T, F>(
    mut f: F,
    theta: &[T],
    coords: &[usize],
    step: impl Fn(T) -> T,
) -> Result<Vec<Option<T>>, GradCheckError>
where
    T: Scalar,
    F: FnMut(&[T]) -> (T, Vec<bool>),
{
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = point[i];
        let h = step(orig);
        if !(h > T::zero()) {
            return Err(GradCheckError::BadStep(h.to_f64().unwrap_or(f64::NAN)));
        }
        point[i] = orig + h;
        let (plus, plus_pattern) = f(&point);
        point[i] = orig - h;
        let (minus, minus_pattern) = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinite(i));
        }
        if plus_pattern != minus_pattern {
            out.push(None);
            continue;
        }
        let span = (orig + h) - (orig - h);
        out.push(Some((plus - minus) / span));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
