//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum over coordinates of `|analytic − numeric| / (|analytic| + 1e-8)`,
/// where the numeric gradient uses central differences with step `h`.
///
/// `f` builds a scalar from a leaf holding `x`; it is re-run on a fresh
/// [`Graph`] for every probe.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::new();
    let leaf = g.param(x.clone());
    let root = f(&g, leaf)?;
    let analytic = g.backward(root)?.wrt(leaf)?;

    let eval = |point: Tensor| -> Result<f64> {
        let g = Graph::new();
        let leaf = g.param(point);
        let value = g.item(f(&g, leaf)?)?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("finite_diff_check"))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
