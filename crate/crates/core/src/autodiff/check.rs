//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv);
    let v = g.value(y).item();
    if !v.is_finite() {
        return Err(Error::NumericStage {
            stage: "check_gradient".into(),
            detail: format!("function value {v}"),
        });
    }
    Ok(v)
}

/// Analytic adjoint of the scalar `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv);
    let grads = g.backward(y)?;
    Ok(grads.get(xv))
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`,
/// with the numeric derivative from `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    check_gradient_at(f, x, eps, &coords)
}

/// Same as [`check_gradient`] restricted to a subset of coordinates.
pub fn check_gradient_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    assert!(eps > 0.0, "eps must be positive");
    let analytic = analytic_gradient(&f, x)?;
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
