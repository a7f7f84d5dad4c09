use super::{Array, Graph, Var};
use crate::error::Result;

/// Largest relative disagreement between reverse-mode gradients and central
/// finite differences of a scalar-valued graph builder `f` at `x`.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`;
/// the floor keeps entries whose true gradient is zero from dividing by
/// round-off.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = f(&mut g, xv)?;
        g.backward(y);
        g.grad(xv).cloned().unwrap_or_else(|| Array::zeros(x.shape()))
    };
    let eval = |probe: Array| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.param(probe);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).data().iter().sum())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    Ok(worst)
}
