//! Finite-difference gradient verification.

use super::rng::Rng;
use crate::error::{invalid, Error, Result};

/// Most coordinates probed by [`finite_difference_check`].
pub const MAX_CHECKED_COORDS: usize = 200;

/// Maximum relative error between `analytic` and a numerical gradient of
/// `f` at `point`.
///
/// The numerical derivative uses the fourth-order central stencil
/// `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`. The relative error of
/// a coordinate is `|a - n| / (|a| + |n| + 1e-8)`. When the vector is longer
/// than [`MAX_CHECKED_COORDS`] a random subset of coordinates is probed.
pub fn finite_difference_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    finite_difference_check_with(f, point, analytic, step, 1e-8, MAX_CHECKED_COORDS, rng)
}

/// As [`finite_difference_check`] with an explicit absolute `floor` in the
/// denominator and at most `max_coords` probed coordinates.
pub fn finite_difference_check_with<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(invalid(format!("step must be positive, got {step}")));
    }
    if analytic.len() != point.len() {
        return Err(invalid("analytic gradient length differs from point"));
    }
    let coords: Vec<usize> = if point.len() <= max_coords {
        (0..point.len()).collect()
    } else {
        let mut idx: Vec<usize> = (0..point.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(max_coords);
        idx
    };
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let mut eval = |delta: f64, x: &mut Vec<f64>| -> Result<f64> {
            x[i] = point[i] + delta;
            let v = f(x)?;
            if !v.is_finite() {
                return Err(Error::NonFinite("finite_difference_check"));
            }
            Ok(v)
        };
        let fp2 = eval(2.0 * step, &mut x)?;
        let fp1 = eval(step, &mut x)?;
        let fm1 = eval(-step, &mut x)?;
        let fm2 = eval(-2.0 * step, &mut x)?;
        x[i] = point[i];
        let numeric = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
