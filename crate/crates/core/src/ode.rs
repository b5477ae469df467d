//! Learned latent dynamics integrated with fixed-step classical RK4.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::nn::{init_linear, linear, Bound, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub hidden: usize,
    /// RK4 steps per unit of time.
    pub steps_per_unit: usize,
    /// Feed the time `τ` to the field; `false` gives an autonomous field.
    pub time_input: bool,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            steps_per_unit: 32,
            time_input: true,
        }
    }
}

/// Number of uniform steps used to go from `t0` to `t1`.
pub fn step_count(t0: f64, t1: f64, steps_per_unit: usize) -> usize {
    let x = (t1 - t0) * steps_per_unit as f64;
    // tolerate rounding on step-aligned spans
    (x - 1e-9).ceil().max(1.0) as usize
}

fn check_span(t0: f64, t1: f64, steps_per_unit: usize) -> Result<()> {
    if steps_per_unit == 0 {
        return Err(contract("steps_per_unit must be at least 1"));
    }
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(contract(format!("cannot integrate backwards or over non-finite span {t0} -> {t1}")));
    }
    Ok(())
}

fn stage_failure(stage: &str, tau: f64) -> Error {
    Error::NumericStage {
        stage: format!("rk4 {stage}"),
        detail: format!("non-finite derivative at tau = {tau}"),
    }
}

/// One classical RK4 step of `dg/dτ = f(τ, g)`.
pub fn rk4_step(mut f: impl FnMut(f64, &[f64]) -> Vec<f64>, g: &[f64], tau: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(contract(format!("rk4 step size must be positive, got {h}")));
    }
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { g.iter().zip(k).map(|(x, y)| x + a * y).collect() };
    let check = |k: Vec<f64>, name: &str, at: f64| {
        if k.iter().all(|v| v.is_finite()) {
            Ok(k)
        } else {
            Err(stage_failure(name, at))
        }
    };
    let k1 = check(f(tau, g), "k1", tau)?;
    let k2 = check(f(tau + h / 2.0, &axpy(h / 2.0, &k1)), "k2", tau + h / 2.0)?;
    let k3 = check(f(tau + h / 2.0, &axpy(h / 2.0, &k2)), "k3", tau + h / 2.0)?;
    let k4 = check(f(tau + h, &axpy(h, &k3)), "k4", tau + h)?;
    Ok((0..g.len())
        .map(|i| g[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrates `f` from `t0` to `t1` with uniform RK4 steps.
pub fn ode_solve(
    mut f: impl FnMut(f64, &[f64]) -> Vec<f64>,
    g0: &[f64],
    t0: f64,
    t1: f64,
    steps_per_unit: usize,
) -> Result<Vec<f64>> {
    check_span(t0, t1, steps_per_unit)?;
    if t1 == t0 {
        return Ok(g0.to_vec());
    }
    let n = step_count(t0, t1, steps_per_unit);
    let h = (t1 - t0) / n as f64;
    let mut g = g0.to_vec();
    for i in 0..n {
        g = rk4_step(&mut f, &g, t0 + i as f64 * h, h)?;
    }
    Ok(g)
}

/// `f(g, τ) = W2 tanh(W1 [g; τ] + b1) + b2`, parameters under `ode.`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsField {
    pub dim: usize,
    pub cfg: OdeConfig,
}

impl DynamicsField {
    pub fn new(dim: usize, cfg: OdeConfig) -> Self {
        Self { dim, cfg }
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Params {
        let mut p = Params::new();
        let fan_in = self.dim + usize::from(self.cfg.time_input);
        init_linear(&mut p, "ode.l1", fan_in, self.cfg.hidden, false, rng);
        init_linear(&mut p, "ode.l2", self.cfg.hidden, self.dim, false, rng);
        p
    }

    /// Field evaluated on the graph for a `[1, G]` state.
    pub fn eval(&self, g: &mut Graph, b: &Bound, state: Var, tau: f64) -> Var {
        let x = if self.cfg.time_input {
            let t = g.constant(Tensor::scalar(tau).reshape(&[1, 1]));
            g.concat_cols(&[state, t])
        } else {
            state
        };
        let h = linear(g, b, "ode.l1", x);
        let h = g.tanh(h);
        linear(g, b, "ode.l2", h)
    }

    /// Field on plain values, for inspection and tests.
    pub fn eval_values(&self, p: &Params, state: &[f64], tau: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let s = g.constant(Tensor::row(state.to_vec()));
        let out = self.eval(&mut g, &b, s, tau);
        g.value(out).data().to_vec()
    }

    /// Differentiable solve from `t0` to `t1`; an empty span returns `g0` itself.
    pub fn solve(&self, g: &mut Graph, b: &Bound, g0: Var, t0: f64, t1: f64) -> Result<Var> {
        check_span(t0, t1, self.cfg.steps_per_unit)?;
        if t1 == t0 {
            return Ok(g0);
        }
        let n = step_count(t0, t1, self.cfg.steps_per_unit);
        let h = (t1 - t0) / n as f64;
        let mut state = g0;
        for i in 0..n {
            let tau = t0 + i as f64 * h;
            state = self.rk4_graph(g, b, state, tau, h)?;
        }
        Ok(state)
    }

    fn rk4_graph(&self, g: &mut Graph, b: &Bound, s: Var, tau: f64, h: f64) -> Result<Var> {
        let check = |g: &Graph, k: Var, name: &str, at: f64| {
            if g.value(k).all_finite() {
                Ok(k)
            } else {
                Err(stage_failure(name, at))
            }
        };
        let k1 = self.eval(g, b, s, tau);
        check(g, k1, "k1", tau)?;
        let d = g.scale(k1, h / 2.0);
        let s2 = g.add(s, d);
        let k2 = self.eval(g, b, s2, tau + h / 2.0);
        check(g, k2, "k2", tau + h / 2.0)?;
        let d = g.scale(k2, h / 2.0);
        let s3 = g.add(s, d);
        let k3 = self.eval(g, b, s3, tau + h / 2.0);
        check(g, k3, "k3", tau + h / 2.0)?;
        let d = g.scale(k3, h);
        let s4 = g.add(s, d);
        let k4 = self.eval(g, b, s4, tau + h);
        check(g, k4, "k4", tau + h)?;
        let k23 = g.add(k2, k3);
        let k23 = g.scale(k23, 2.0);
        let acc = g.add(k1, k23);
        let acc = g.add(acc, k4);
        let acc = g.scale(acc, h / 6.0);
        Ok(g.add(s, acc))
    }
}
