//! Gradients of a terminal loss through a fixed-step ODE solve.
//!
//! [`adjoint_gradient`] solves the forward problem keeping only `x(T)`, then
//! integrates the augmented state `[x, p, gw]` backward from `T` to `0`:
//! `x' = f`, `p' = -(df/dx)^T p`, `gw' = -(df/dW)^T p`, with
//! `p(t) = +dL/dx(t)`. Nothing proportional to the step count is kept.
//! The optimal-control costate is `P = -p`.
//!
//! [`backprop_through_solver`] stores the whole trajectory and differentiates
//! the discrete solver exactly. It is the reference the adjoint converges to
//! as the step shrinks.

use crate::error::{check_len, invalid, Error, Result};
use crate::nn::{GradSet, ParamSet};
use crate::ode::{integrate_final, rk4_step, Dynamics, FnDynamics, Scheme, StateVec, TimeGrid};

/// A vector field `f(x, t; W)` with time-invariant parameters `W`.
pub trait ParametricDynamics: Dynamics {
    fn params(&self) -> &[f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// The same field with parameters replaced.
    fn with_params(&self, w: &[f64]) -> Result<Self>
    where
        Self: Sized;

    /// `(cot^T df/dx, cot^T df/dW)`
    fn vjp_full(&self, x: &[f64], t: f64, cot: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// `x' = a x` in one dimension, parameter `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLinear {
    a: [f64; 1],
}

impl ScalarLinear {
    pub fn new(a: f64) -> Self {
        Self { a: [a] }
    }
}

impl Dynamics for ScalarLinear {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        vec![self.a[0] * x[0]]
    }
}

impl ParametricDynamics for ScalarLinear {
    fn params(&self) -> &[f64] {
        &self.a
    }

    fn with_params(&self, w: &[f64]) -> Result<Self> {
        check_len("parameters", 1, w.len())?;
        Ok(Self::new(w[0]))
    }

    fn vjp_full(&self, x: &[f64], _t: f64, cot: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (vec![self.a[0] * cot[0]], vec![x[0] * cot[0]])
    }
}

/// Autonomous `x' = net(x)` for a network with equal input and output width.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    net: ParamSet,
}

impl MlpField {
    pub fn new(net: ParamSet) -> Result<Self> {
        check_len("field output width", net.input_dim(), net.output_dim())?;
        Ok(Self { net })
    }

    pub fn net(&self) -> &ParamSet {
        &self.net
    }
}

impl Dynamics for MlpField {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        self.net.forward(x).expect("state width checked by the solver")
    }
}

impl ParametricDynamics for MlpField {
    fn params(&self) -> &[f64] {
        self.net.values()
    }

    fn with_params(&self, w: &[f64]) -> Result<Self> {
        Ok(Self {
            net: self.net.with_values(w.to_vec())?,
        })
    }

    fn vjp_full(&self, x: &[f64], _t: f64, cot: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (dx, dw) = self.net.vjp(x, cot).expect("state width checked by the solver");
        (dx, dw.into_vec())
    }
}

/// Loss value and gradients at the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub dx0: StateVec,
    pub dw: GradSet,
    /// `x(0)` as recovered by the backward solve; equal to the input for the
    /// discrete comparator.
    pub x0_reconstructed: StateVec,
}

fn explicit_only(scheme: Scheme) -> Result<()> {
    match scheme {
        Scheme::Euler | Scheme::Rk4 => Ok(()),
        other => Err(invalid(format!("gradient solvers support euler and rk4, not {}", other.name()))),
    }
}

/// Continuous adjoint gradient of `loss(x(T))`, O(1) memory in the step
/// count. `loss` returns the value and `dL/dx(T)`.
pub fn adjoint_gradient<D, L>(x0: &[f64], grid: &TimeGrid, f: &D, scheme: Scheme, loss: L) -> Result<Gradients>
where
    D: ParametricDynamics,
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    explicit_only(scheme)?;
    let d = f.dim();
    let np = f.num_params();
    let xt = integrate_final(x0, grid, f, scheme)?;
    let (value, gx) = loss(&xt);
    check_len("loss gradient", d, gx.len())?;

    // Reverse time s = t0 + t1 - t runs forward over the same step count.
    let shift = grid.t0() + grid.t1();
    let back = TimeGrid::new(grid.t0(), grid.t1(), grid.steps())?;
    let aug = FnDynamics::new(2 * d + np, |z: &[f64], s: f64| {
        let (x, p) = (&z[..d], &z[d..2 * d]);
        let t = shift - s;
        let v = f.eval(x, t);
        let (px, pw) = f.vjp_full(x, t, p);
        let mut out = Vec::with_capacity(z.len());
        out.extend(v.iter().map(|a| -a));
        out.extend(px);
        out.extend(pw);
        out
    });
    let mut z0 = Vec::with_capacity(2 * d + np);
    z0.extend_from_slice(&xt);
    z0.extend_from_slice(&gx);
    z0.resize(2 * d + np, 0.0);
    let z = integrate_final(&z0, &back, &aug, scheme).map_err(|e| match e {
        Error::NonFinite { step } => Error::ReversalInstability { step },
        other => other,
    })?;
    Ok(Gradients {
        loss: value,
        dx0: z[d..2 * d].to_vec(),
        dw: GradSet::from_vec(z[2 * d..].to_vec()),
        x0_reconstructed: z[..d].to_vec(),
    })
}

/// Exact reverse-mode derivative of the discrete euler or rk4 solve.
pub fn backprop_through_solver<D, L>(x0: &[f64], grid: &TimeGrid, f: &D, scheme: Scheme, loss: L) -> Result<Gradients>
where
    D: ParametricDynamics,
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    explicit_only(scheme)?;
    check_len("initial state", f.dim(), x0.len())?;
    let h = grid.h();
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(x0.to_vec());
    for k in 0..grid.steps() {
        let x = states.last().expect("non-empty");
        let next = match scheme {
            Scheme::Euler => crate::ode::euler_step(x, grid.time(k), h, f)?,
            _ => rk4_step(x, grid.time(k), h, f)?,
        };
        states.push(next);
    }
    let (value, gx) = loss(states.last().expect("non-empty"));
    check_len("loss gradient", f.dim(), gx.len())?;

    let mut a = gx;
    let mut dw = vec![0.0; f.num_params()];
    for k in (0..grid.steps()).rev() {
        let t = grid.time(k);
        a = match scheme {
            Scheme::Euler => euler_vjp(f, &states[k], t, h, &a, &mut dw),
            _ => rk4_vjp(f, &states[k], t, h, &a, &mut dw),
        };
    }
    Ok(Gradients {
        loss: value,
        dx0: a,
        dw: GradSet::from_vec(dw),
        x0_reconstructed: x0.to_vec(),
    })
}

fn scaled(s: f64, v: &[f64]) -> Vec<f64> {
    v.iter().map(|a| s * a).collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn euler_vjp<D: ParametricDynamics>(f: &D, x: &[f64], t: f64, h: f64, a: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let (vx, vw) = f.vjp_full(x, t, &scaled(h, a));
    add_into(dw, &vw);
    a.iter().zip(&vx).map(|(p, q)| p + q).collect()
}

fn rk4_vjp<D: ParametricDynamics>(f: &D, x: &[f64], t: f64, h: f64, a: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let half = 0.5 * h;
    let shifted = |k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + s * ki).collect() };
    let k1 = f.eval(x, t);
    let y2 = shifted(&k1, half);
    let k2 = f.eval(&y2, t + half);
    let y3 = shifted(&k2, half);
    let k3 = f.eval(&y3, t + half);
    let y4 = shifted(&k3, h);

    let mut xbar = a.to_vec();
    let mut k1bar = scaled(h / 6.0, a);
    let mut k2bar = scaled(h / 3.0, a);
    let mut k3bar = scaled(h / 3.0, a);
    let k4bar = scaled(h / 6.0, a);

    let (y4bar, w4) = f.vjp_full(&y4, t + h, &k4bar);
    add_into(dw, &w4);
    add_into(&mut xbar, &y4bar);
    add_into(&mut k3bar, &scaled(h, &y4bar));

    let (y3bar, w3) = f.vjp_full(&y3, t + half, &k3bar);
    add_into(dw, &w3);
    add_into(&mut xbar, &y3bar);
    add_into(&mut k2bar, &scaled(half, &y3bar));

    let (y2bar, w2) = f.vjp_full(&y2, t + half, &k2bar);
    add_into(dw, &w2);
    add_into(&mut xbar, &y2bar);
    add_into(&mut k1bar, &scaled(half, &y2bar));

    let (y1bar, w1) = f.vjp_full(x, t, &k1bar);
    add_into(dw, &w1);
    add_into(&mut xbar, &y1bar);
    xbar
}

/// `L = |x|^2 / 2`
pub fn half_square(x: &[f64]) -> (f64, Vec<f64>) {
    (0.5 * crate::linalg::dot(x, x), x.to_vec())
}
