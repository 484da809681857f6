//! Fixed-step ODE integration.
//!
//! Every scheme here is a plain function of its arguments: no adaptive step
//! control, no hidden state. That makes trajectories bitwise reproducible,
//! which the adjoint replay and the network/integrator equivalence checks
//! rely on.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{all_finite, max_abs};

/// A state vector. Entries must be finite.
pub type StateVec = Vec<f64>;

/// Right-hand side `dx/dt = f(x, t)`.
pub trait Dynamics {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64>;
}

/// Dynamics that also expose Jacobian-vector and vector-Jacobian products
/// with respect to the state.
pub trait Jacobian: Dynamics {
    /// `(df/dx) v`
    fn jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64>;
    /// `(df/dx)^T c`
    fn vjp(&self, x: &[f64], t: f64, cot: &[f64]) -> Vec<f64>;
}

impl<D: Dynamics + ?Sized> Dynamics for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).eval(x, t)
    }
}

impl<D: Jacobian + ?Sized> Jacobian for &D {
    fn jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        (**self).jvp(x, t, v)
    }
    fn vjp(&self, x: &[f64], t: f64, cot: &[f64]) -> Vec<f64> {
        (**self).vjp(x, t, cot)
    }
}

/// Wraps a closure as [`Dynamics`].
pub struct FnDynamics<F> {
    dim: usize,
    f: F,
}

impl<F> FnDynamics<F>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Dynamics for FnDynamics<F>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        (self.f)(x, t)
    }
}

/// Autonomous linear dynamics `f(x) = A x` (row-major `A`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    dim: usize,
    a: Vec<f64>,
}

impl LinearDynamics {
    pub fn new(dim: usize, a: Vec<f64>) -> Result<Self> {
        crate::error::check_len("linear dynamics matrix", dim * dim, a.len())?;
        Ok(Self { dim, a })
    }

    /// `f(x) = lambda * x`
    pub fn scalar(lambda: f64) -> Self {
        Self {
            dim: 1,
            a: vec![lambda],
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut a = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            a[i * n + i] = *d;
        }
        Self { dim: n, a }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| crate::linalg::dot(&self.a[i * n..(i + 1) * n], v))
            .collect()
    }
}

impl Dynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        self.apply(x)
    }
}

impl Jacobian for LinearDynamics {
    fn jvp(&self, _x: &[f64], _t: f64, v: &[f64]) -> Vec<f64> {
        self.apply(v)
    }
    fn vjp(&self, _x: &[f64], _t: f64, cot: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|j| (0..n).map(|i| self.a[i * n + j] * cot[i]).sum())
            .collect()
    }
}

/// Uniform time grid `t0 = s_0 < s_1 < ... < s_K = t1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        if !(t0.is_finite() && t1.is_finite() && t0 < t1) {
            return Err(invalid(format!("time grid needs t0 < t1, got [{t0}, {t1}]")));
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn span(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn h(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    /// Time of node `k`, `t0 + k h` evaluated as one fused multiply-add.
    pub fn time(&self, k: usize) -> f64 {
        self.h().mul_add(k as f64, self.t0)
    }
}

/// Options for the fixed-point solve inside [`backward_euler_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Anderson mixing depth; 0 gives plain Picard iteration.
    pub memory: usize,
}

impl Default for ImplicitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            memory: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
    BackwardEuler(ImplicitOptions),
    /// `x' = (1-k) x + k x_prev + (1+k) h f(x)`; second order only at `k = 1`.
    Lm2 { k: f64 },
    /// Explicit midpoint two-step `x' = x_prev + 2 h f(x)`.
    Leapfrog,
}

impl Scheme {
    /// Nominal order of accuracy.
    pub fn order(&self) -> u32 {
        match self {
            Scheme::Euler | Scheme::BackwardEuler(_) => 1,
            Scheme::Rk4 => 4,
            Scheme::Leapfrog => 2,
            Scheme::Lm2 { k } => {
                if *k == 1.0 {
                    2
                } else {
                    1
                }
            }
        }
    }

    pub fn lm2_second_order() -> Self {
        Scheme::Lm2 { k: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
            Scheme::BackwardEuler(_) => "backward_euler",
            Scheme::Lm2 { .. } => "lm2",
            Scheme::Leapfrog => "leapfrog",
        }
    }
}

fn finite_or(step: usize, v: Vec<f64>) -> Result<Vec<f64>> {
    if all_finite(&v) {
        Ok(v)
    } else {
        Err(Error::NonFinite { step })
    }
}

fn relabel(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFinite { step },
        other => other,
    }
}

/// One forward Euler step `x + h f(x, t)`.
pub fn euler_step<D: Dynamics + ?Sized>(x: &[f64], t: f64, h: f64, f: &D) -> Result<StateVec> {
    let v = f.eval(x, t);
    crate::error::check_len("dynamics output", x.len(), v.len())?;
    let out = x.iter().zip(&v).map(|(xi, vi)| xi + h * vi).collect();
    finite_or(0, out)
}

/// One classical four-stage Runge-Kutta step.
pub fn rk4_step<D: Dynamics + ?Sized>(x: &[f64], t: f64, h: f64, f: &D) -> Result<StateVec> {
    let half = 0.5 * h;
    let k1 = f.eval(x, t);
    crate::error::check_len("dynamics output", x.len(), k1.len())?;
    let y: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + half * b).collect();
    let k2 = f.eval(&y, t + half);
    let y: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + half * b).collect();
    let k3 = f.eval(&y, t + half);
    let y: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
    let k4 = f.eval(&y, t + h);
    let sixth = h / 6.0;
    let out = (0..x.len())
        .map(|i| x[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    finite_or(0, out)
}

/// One backward Euler step: solves `y = x + h f(y, t + h)`.
///
/// The fixed point is found by Anderson-accelerated Picard iteration seeded
/// at the forward Euler prediction. Returns once the fixed-point residual
/// `|x + h f(y) - y|_inf`, i.e. the gap to the next Picard iterate, drops
/// below `opts.tol`.
pub fn backward_euler_step<D: Dynamics + ?Sized>(
    x: &[f64],
    t: f64,
    h: f64,
    f: &D,
    opts: ImplicitOptions,
) -> Result<StateVec> {
    if !(opts.tol > 0.0) {
        return Err(invalid("backward Euler tolerance must be positive"));
    }
    let n = x.len();
    let t_next = t + h;
    let picard = |y: &[f64]| -> Result<Vec<f64>> {
        let v = f.eval(y, t_next);
        crate::error::check_len("dynamics output", n, v.len())?;
        Ok(x.iter().zip(&v).map(|(xi, vi)| xi + h * vi).collect())
    };

    let mut y = euler_step(x, t, h, f)?;
    // History of residual and image differences, newest last.
    let mut d_res: Vec<Vec<f64>> = Vec::new();
    let mut d_img: Vec<Vec<f64>> = Vec::new();
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut residual = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let g = picard(&y)?;
        let r: Vec<f64> = g.iter().zip(&y).map(|(a, b)| a - b).collect();
        residual = max_abs(&r);
        if !residual.is_finite() {
            break;
        }
        if residual < opts.tol {
            return Ok(y);
        }
        if let Some((g_prev, r_prev)) = prev.take() {
            d_res.push(r.iter().zip(&r_prev).map(|(a, b)| a - b).collect());
            d_img.push(g.iter().zip(&g_prev).map(|(a, b)| a - b).collect());
            if d_res.len() > opts.memory {
                d_res.remove(0);
                d_img.remove(0);
            }
        }

        let mut next = g.clone();
        if !d_res.is_empty() {
            match anderson_weights(&d_res, &r) {
                Some(gamma) => {
                    for (gi, col) in gamma.iter().zip(&d_img) {
                        crate::linalg::axpy(-gi, col, &mut next);
                    }
                }
                None => {
                    d_res.clear();
                    d_img.clear();
                }
            }
        }
        prev = Some((g, r));
        y = next;
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Least-squares weights `argmin |r - sum_j gamma_j d_j|` via regularized
/// normal equations.
fn anderson_weights(cols: &[Vec<f64>], r: &[f64]) -> Option<Vec<f64>> {
    let m = cols.len();
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        for j in 0..=i {
            let v = crate::linalg::dot(&cols[i], &cols[j]);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
        rhs[i] = crate::linalg::dot(&cols[i], r);
    }
    let scale = (0..m).map(|i| gram[i * m + i]).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for i in 0..m {
        gram[i * m + i] += 1e-13 * scale;
    }
    crate::linalg::solve(gram, rhs, m).filter(|g| all_finite(g))
}

/// Stored path `x(s_0), ..., x(s_K)` in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            states: Vec::with_capacity(dim * (grid.steps() + 1)),
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.states.extend_from_slice(x);
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored nodes.
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.states.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
}

/// Integrates `x0` over `grid`, keeping every node.
pub fn integrate<D: Dynamics + ?Sized>(
    x0: &[f64],
    grid: &TimeGrid,
    f: &D,
    scheme: Scheme,
) -> Result<Trajectory> {
    let mut traj = Trajectory::new(*grid, x0.len());
    march(x0, grid, f, scheme, |_, x| traj.push(x))?;
    Ok(traj)
}

/// Integrates `x0` over `grid`, returning only the terminal state.
pub fn integrate_final<D: Dynamics + ?Sized>(
    x0: &[f64],
    grid: &TimeGrid,
    f: &D,
    scheme: Scheme,
) -> Result<StateVec> {
    let mut last = Vec::new();
    march(x0, grid, f, scheme, |k, x| {
        if k == grid.steps() {
            last = x.to_vec();
        }
    })?;
    Ok(last)
}

/// Drives a scheme over the grid, handing each node to `visit`.
fn march<D, V>(x0: &[f64], grid: &TimeGrid, f: &D, scheme: Scheme, mut visit: V) -> Result<()>
where
    D: Dynamics + ?Sized,
    V: FnMut(usize, &[f64]),
{
    crate::error::check_len("initial state", f.dim(), x0.len())?;
    if !all_finite(x0) {
        return Err(Error::NonFinite { step: 0 });
    }
    let h = grid.h();
    let mut x = x0.to_vec();
    visit(0, &x);

    match scheme {
        Scheme::Euler | Scheme::Rk4 | Scheme::BackwardEuler(_) => {
            for k in 0..grid.steps() {
                let t = grid.time(k);
                x = match scheme {
                    Scheme::Euler => euler_step(&x, t, h, f),
                    Scheme::Rk4 => rk4_step(&x, t, h, f),
                    Scheme::BackwardEuler(opts) => backward_euler_step(&x, t, h, f, opts),
                    _ => unreachable!(),
                }
                .map_err(relabel(k + 1))?;
                visit(k + 1, &x);
            }
        }
        Scheme::Lm2 { .. } | Scheme::Leapfrog => {
            let (keep, carry) = match scheme {
                Scheme::Lm2 { k } => (1.0 - k, k),
                _ => (0.0, 1.0),
            };
            let gain = (1.0 + carry) * h;
            // Bootstrap the two-step recursion with one rk4 step.
            let mut prev = x;
            x = rk4_step(&prev, grid.time(0), h, f).map_err(relabel(1))?;
            visit(1, &x);
            for k in 1..grid.steps() {
                let v = f.eval(&x, grid.time(k));
                let next: Vec<f64> = (0..x.len())
                    .map(|i| keep * x[i] + carry * prev[i] + gain * v[i])
                    .collect();
                let next = finite_or(k + 1, next)?;
                prev = std::mem::replace(&mut x, next);
                visit(k + 1, &x);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expo() -> LinearDynamics {
        LinearDynamics::scalar(1.0)
    }

    fn zero2() -> FnDynamics<impl Fn(&[f64], f64) -> Vec<f64>> {
        FnDynamics::new(2, |x: &[f64], _| vec![0.0; x.len()])
    }

    fn observed_order(scheme: Scheme, ks: &[usize]) -> f64 {
        let errs: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let grid = TimeGrid::new(0.0, 1.0, k).unwrap();
                let x = integrate_final(&[1.0], &grid, &expo(), scheme).unwrap();
                (x[0] - 1f64.exp()).abs()
            })
            .collect();
        // least-squares slope of log(err) against log(h)
        let pts: Vec<(f64, f64)> = ks
            .iter()
            .zip(&errs)
            .map(|(&k, &e)| ((1.0 / k as f64).ln(), e.ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn grid_rejects_empty_and_reversed() {
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(2.0, 1.0, 4).is_err());
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert_eq!(g.h(), 0.1);
        assert_eq!(g.time(3), 0.1f64.mul_add(3.0, 0.0));
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let x = [3.0, -1.0];
        assert_eq!(euler_step(&x, 0.0, 0.5, &zero2()).unwrap(), x.to_vec());
        assert_eq!(rk4_step(&x, 0.0, 0.5, &zero2()).unwrap(), x.to_vec());
        let y = backward_euler_step(&x, 0.0, 0.5, &zero2(), ImplicitOptions::default()).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn euler_single_step_arithmetic() {
        assert_eq!(euler_step(&[1.0], 0.0, 0.1, &expo()).unwrap(), vec![1.1]);
    }

    #[test]
    fn euler_ten_steps_against_exponential() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let x = integrate_final(&[1.0], &grid, &expo(), Scheme::Euler).unwrap();
        // (1.1)^10
        assert!((x[0] - 1.1f64.powi(10)).abs() < 1e-14);
        assert!((x[0] - 2.5937424601).abs() < 1e-10);
        let err = 1f64.exp() - x[0];
        assert!((err - 0.1245).abs() < 1e-3, "global error {err}");
    }

    #[test]
    fn rk4_ten_steps_against_exponential() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let x = integrate_final(&[1.0], &grid, &expo(), Scheme::Rk4).unwrap();
        assert!((x[0] - 1f64.exp()).abs() < 1e-5);
    }

    #[test]
    fn observed_orders_match_nominal() {
        let cases = [
            (Scheme::Euler, vec![20, 40, 80, 160]),
            (Scheme::Rk4, vec![4, 8, 16, 32]),
            (Scheme::Leapfrog, vec![20, 40, 80, 160]),
            (Scheme::lm2_second_order(), vec![20, 40, 80, 160]),
            (Scheme::BackwardEuler(ImplicitOptions::default()), vec![20, 40, 80, 160]),
        ];
        for (scheme, ks) in cases {
            let p = observed_order(scheme, &ks);
            assert!(
                (p - scheme.order() as f64).abs() < 0.2,
                "{} order {p}",
                scheme.name()
            );
        }
    }

    #[test]
    fn lm2_other_mixing_weights_are_first_order() {
        for k in [0.0, 0.5] {
            let p = observed_order(Scheme::Lm2 { k }, &[40, 80, 160, 320]);
            assert!((p - 1.0).abs() < 0.2, "k={k} order {p}");
        }
    }

    #[test]
    fn lm2_with_zero_mixing_is_euler_after_bootstrap() {
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let f = LinearDynamics::scalar(-0.7);
        let lm = integrate(&[1.0], &grid, &f, Scheme::Lm2 { k: 0.0 }).unwrap();
        let mut x = lm.state(1).to_vec();
        for k in 1..8 {
            x = euler_step(&x, grid.time(k), grid.h(), &f).unwrap();
            assert_eq!(x, lm.state(k + 1));
        }
    }

    #[test]
    fn backward_euler_linear_closed_form() {
        let f = LinearDynamics::scalar(-1.0);
        let y = backward_euler_step(&[1.0], 0.0, 0.1, &f, ImplicitOptions::default()).unwrap();
        assert!((y[0] - 1.0 / 1.1).abs() < 1e-10);
    }

    #[test]
    fn backward_euler_residual_below_tolerance() {
        let f = FnDynamics::new(2, |x: &[f64], t| vec![(x[1] + t).sin() - x[0], -2.0 * x[0].tanh()]);
        let x = [0.4, -1.3];
        let (t, h) = (0.2, 0.3);
        let opts = ImplicitOptions::default();
        let y = backward_euler_step(&x, t, h, &f, opts).unwrap();
        let fy = f.eval(&y, t + h);
        let res = (0..2).map(|i| (y[i] - x[i] - h * fy[i]).abs()).fold(0.0, f64::max);
        assert!(res < opts.tol, "residual {res}");
    }

    #[test]
    fn stiff_decay_backward_vs_forward() {
        let f = LinearDynamics::scalar(-30.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let be = integrate(&[1.0], &grid, &f, Scheme::BackwardEuler(ImplicitOptions::default())).unwrap();
        let fe = integrate(&[1.0], &grid, &f, Scheme::Euler).unwrap();
        for k in 0..10 {
            let (a, b) = (be.state(k)[0], be.state(k + 1)[0]);
            assert!(b > 0.0 && b < a, "backward Euler not monotone at {k}");
            assert!((b - 0.25f64.powi(k as i32 + 1)).abs() < 1e-9);
            let (c, d) = (fe.state(k)[0], fe.state(k + 1)[0]);
            assert!(c * d < 0.0 && d.abs() > c.abs(), "forward Euler should oscillate and grow");
        }
    }

    #[test]
    fn plain_picard_cannot_handle_the_stiff_step() {
        let f = LinearDynamics::scalar(-30.0);
        let opts = ImplicitOptions {
            memory: 0,
            ..ImplicitOptions::default()
        };
        let err = backward_euler_step(&[1.0], 0.0, 0.1, &f, opts).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn non_finite_output_carries_step_index() {
        let f = FnDynamics::new(1, |x: &[f64], _| vec![if x[0] > 2.0 { f64::NAN } else { 1.0 }]);
        let grid = TimeGrid::new(0.0, 5.0, 5).unwrap();
        match integrate(&[0.0], &grid, &f, Scheme::Euler) {
            Err(Error::NonFinite { step }) => assert_eq!(step, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn integrate_euler_matches_repeated_steps_bitwise() {
        let f = FnDynamics::new(2, |x: &[f64], t| vec![x[1].sin() + t, -x[0] * x[1]]);
        let grid = TimeGrid::new(0.3, 1.7, 13).unwrap();
        let traj = integrate(&[0.5, 0.25], &grid, &f, Scheme::Euler).unwrap();
        assert_eq!(traj.len(), 14);
        let mut x = vec![0.5, 0.25];
        for k in 0..13 {
            assert_eq!(traj.state(k), &x[..]);
            x = euler_step(&x, grid.time(k), grid.h(), &f).unwrap();
        }
        assert_eq!(traj.last(), &x[..]);
    }

    #[test]
    fn leapfrog_harmonic_oscillator_energy() {
        let f = LinearDynamics::new(2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let grid = TimeGrid::new(0.0, 2.0 * std::f64::consts::PI, 1000).unwrap();
        let traj = integrate(&[1.0, 0.0], &grid, &f, Scheme::Leapfrog).unwrap();
        let e0 = 0.5;
        let drift = traj
            .states()
            .map(|s| (0.5 * (s[0] * s[0] + s[1] * s[1]) - e0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-3, "energy drift {drift}");
    }

    #[test]
    fn integration_is_deterministic() {
        let f = FnDynamics::new(1, |x: &[f64], t| vec![(x[0] * t).cos()]);
        let grid = TimeGrid::new(0.0, 2.0, 37).unwrap();
        for scheme in [Scheme::Euler, Scheme::Rk4, Scheme::Leapfrog, Scheme::Lm2 { k: 0.3 }] {
            let a = integrate(&[0.1], &grid, &f, scheme).unwrap();
            let b = integrate(&[0.1], &grid, &f, scheme).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        assert!(matches!(
            integrate(&[1.0, 2.0], &grid, &expo(), Scheme::Euler),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
