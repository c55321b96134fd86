use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, Var};

/// Default central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Compares the analytic gradient of a scalar function with central
/// differences, returning `max |analytic − numeric| / max(1, |analytic|)`
/// over all coordinates of `x`.
///
/// `f` receives a fresh graph and the leaf holding `x` (or its perturbation)
/// and must return a scalar node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        let value = g.value(out).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(value)
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic = g.backward(out)?.wrt(v);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
