//! Central finite differences, used as the reference for every analytic gradient.

use crate::error::{LdamError, Result};
use crate::tensor::Tensor;

/// Estimates `df/dx_i` as `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
///
/// The divisor is the perturbation actually realised in `f32`, so rounding of
/// `x ± h` does not bias the estimate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(LdamError::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let (up, down) = (x0 + h, x0 - h);
        probe.data_mut()[i] = up;
        let fp = f(&probe)?;
        probe.data_mut()[i] = down;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(LdamError::NonFinite(format!(
                "objective at coordinate {i}: f(x+h) = {fp}, f(x-h) = {fm}"
            )));
        }
        grad[i] = ((fp - fm) / (up as f64 - down as f64)) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Like [`finite_diff_grad`], but `f` also returns a signature of its
/// piecewise-linear regime (see [`crate::reference::reference_forward`]). Coordinates whose
/// perturbation changes the signature straddle a kink; they are marked
/// `false` in the returned mask.
pub fn finite_diff_grad_masked<F>(mut f: F, x: &Tensor, h: f32) -> Result<(Tensor, Vec<bool>)>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<u8>)>,
{
    let (_, base) = f(x)?;
    let mut mask = vec![true; x.len()];
    let mut i = 0;
    let grad = finite_diff_grad(
        |t| {
            let (v, sig) = f(t)?;
            // calls alternate +h, -h per coordinate
            if sig != base {
                mask[i / 2] = false;
            }
            i += 1;
            Ok(v)
        },
        x,
        h,
    )?;
    Ok((grad, mask))
}

/// [`max_relative_error`] restricted to coordinates where `mask` is set.
/// The floor still uses the largest magnitude over all coordinates.
pub fn max_relative_error_masked(a: &Tensor, b: &Tensor, mask: &[bool]) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    assert_eq!(a.len(), mask.len(), "mask length differs");
    let scale = a.max_abs().max(b.max_abs()) as f64;
    let floor = (0.01 * scale).max(1e-6);
    a.data()
        .iter()
        .zip(b.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&x, &y), _)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Largest elementwise relative error between two gradients.
///
/// Each coordinate is compared against `max(|a_i|, |b_i|, floor)` where
/// `floor` is 1% of the largest magnitude in either tensor, so coordinates
/// that are numerically zero do not dominate the score.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let scale = a.max_abs().max(b.max_abs()) as f64;
    let floor = (0.01 * scale).max(1e-6);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
