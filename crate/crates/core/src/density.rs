//! Log-density transport under deterministic flows.
//!
//! A particle moved by `dx/dt = f(x, t)` carries its log-density along with
//! `d log q / dt = -div f`. The divergence is either the exact Jacobian trace
//! (one Jacobian-vector product per basis direction) or the Hutchinson
//! estimate `e^T (df/dx) e` with Rademacher probes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};
use crate::linalg::dot;
use crate::nn::ParamSet;
use crate::ode::{integrate_final, Dynamics, FnDynamics, Jacobian, Scheme, StateVec, TimeGrid};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A particle position and the natural log of the density there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityState {
    pub x: StateVec,
    pub logq: f64,
}

/// `log N(x; 0, I)`
pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    -0.5 * (x.len() as f64 * LN_2PI + dot(x, x))
}

/// Trace of `df/dx` at `(x, t)`.
pub fn divergence_exact<D: Jacobian + ?Sized>(f: &D, x: &[f64], t: f64) -> Result<f64> {
    check_len("state", f.dim(), x.len())?;
    let d = x.len();
    let mut e = vec![0.0; d];
    let mut tr = 0.0;
    for i in 0..d {
        e[i] = 1.0;
        tr += f.jvp(x, t, &e)[i];
        e[i] = 0.0;
    }
    Ok(tr)
}

/// Probe distribution for the stochastic trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Rademacher,
    /// Cycles through the standard basis scaled by `sqrt(d)`; `d` probes
    /// give the exact trace.
    Basis,
}

/// Draws `count` probe vectors of width `d`.
pub fn draw_probes<R: Rng + ?Sized>(d: usize, count: usize, kind: Probe, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| match kind {
            Probe::Rademacher => (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
            Probe::Basis => {
                let mut e = vec![0.0; d];
                e[k % d] = (d as f64).sqrt();
                e
            }
        })
        .collect()
}

fn probe_mean<D: Jacobian + ?Sized>(f: &D, x: &[f64], t: f64, probes: &[Vec<f64>]) -> f64 {
    let sum: f64 = probes.iter().map(|e| dot(e, &f.jvp(x, t, e))).sum();
    sum / probes.len() as f64
}

/// Mean of `e^T (df/dx) e` over `probes` random probes.
pub fn divergence_hutchinson<D, R>(f: &D, x: &[f64], t: f64, probes: usize, kind: Probe, rng: &mut R) -> Result<f64>
where
    D: Jacobian + ?Sized,
    R: Rng + ?Sized,
{
    check_len("state", f.dim(), x.len())?;
    if probes == 0 {
        return Err(invalid("need at least one probe"));
    }
    let es = draw_probes(x.len(), probes, kind, rng);
    Ok(probe_mean(f, x, t, &es))
}

/// How `div f` is evaluated during transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TraceMode {
    Exact,
    /// Probes are drawn once from `seed` and held fixed for the whole solve.
    Hutchinson { probes: usize, seed: u64 },
}

fn trace_fn<'a, D: Jacobian + ?Sized>(f: &'a D, mode: TraceMode) -> Result<impl Fn(&[f64], f64) -> f64 + 'a> {
    let probes = match mode {
        TraceMode::Exact => None,
        TraceMode::Hutchinson { probes, seed } => {
            if probes == 0 {
                return Err(invalid("need at least one probe"));
            }
            let mut rng = crate::rng::seeded(seed);
            Some(draw_probes(f.dim(), probes, Probe::Rademacher, &mut rng))
        }
    };
    Ok(move |x: &[f64], t: f64| match &probes {
        None => divergence_exact(f, x, t).expect("width checked"),
        Some(es) => probe_mean(f, x, t, es),
    })
}

/// Integrates `x' = f`, `(log q)' = -div f` jointly.
pub fn transport<D: Jacobian + ?Sized>(
    ds: &DensityState,
    grid: &TimeGrid,
    f: &D,
    scheme: Scheme,
    mode: TraceMode,
) -> Result<DensityState> {
    let d = f.dim();
    check_len("state", d, ds.x.len())?;
    let div = trace_fn(f, mode)?;
    let joint = FnDynamics::new(d + 1, |z: &[f64], t: f64| {
        let x = &z[..d];
        let mut out = f.eval(x, t);
        out.push(-div(x, t));
        out
    });
    let mut z0 = ds.x.clone();
    z0.push(ds.logq);
    let mut z = integrate_final(&z0, grid, &joint, scheme)?;
    let logq = z.pop().expect("joint state");
    Ok(DensityState { x: z, logq })
}

/// `log p(x_data)` for the flow that pushes a standard normal at `t0`
/// forward to `t1`: integrate back to `t0`, then
/// `log N(x(t0)) - int div f dt` along the recovered path.
pub fn cnf_loglik<D: Jacobian + ?Sized>(x_data: &[f64], grid: &TimeGrid, f: &D, scheme: Scheme, mode: TraceMode) -> Result<f64> {
    let d = f.dim();
    check_len("data point", d, x_data.len())?;
    let div = trace_fn(f, mode)?;
    let shift = grid.t0() + grid.t1();
    // s = t0 + t1 - t; the last component accumulates the divergence integral.
    let reversed = FnDynamics::new(d + 1, |z: &[f64], s: f64| {
        let x = &z[..d];
        let t = shift - s;
        let mut out: Vec<f64> = f.eval(x, t).iter().map(|v| -v).collect();
        out.push(div(x, t));
        out
    });
    let mut z0 = x_data.to_vec();
    z0.push(0.0);
    let z = integrate_final(&z0, grid, &reversed, scheme)?;
    Ok(std_normal_logpdf(&z[..d]) - z[d])
}

/// Draws `n` base samples and pushes them through the flow. Sample `i` uses
/// its own stream split from `seed`, including its Hutchinson probes.
pub fn cnf_sample<D: Jacobian + Sync + ?Sized>(
    n: usize,
    grid: &TimeGrid,
    f: &D,
    scheme: Scheme,
    mode: TraceMode,
    seed: u64,
) -> Result<Vec<DensityState>> {
    use rand_distr::{Distribution, StandardNormal};
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sub = crate::rng::mix(seed, i as u64);
            let mut rng = crate::rng::seeded(sub);
            let x: Vec<f64> = (0..f.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let start = DensityState {
                logq: std_normal_logpdf(&x),
                x,
            };
            let mode = match mode {
                TraceMode::Exact => TraceMode::Exact,
                TraceMode::Hutchinson { probes, .. } => TraceMode::Hutchinson {
                    probes,
                    seed: rng.random(),
                },
            };
            transport(&start, grid, f, scheme, mode)
        })
        .collect()
}

/// CSV with columns `sample_id,x0,..,x{d-1},logq`.
pub fn samples_csv(samples: &[DensityState]) -> String {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut out = String::from("sample_id");
    for k in 0..d {
        out.push_str(&format!(",x{k}"));
    }
    out.push_str(",logq\n");
    for (i, s) in samples.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in &s.x {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{:?}\n", s.logq));
    }
    out
}

fn check_scalar(phi: &ParamSet) -> Result<()> {
    if phi.output_dim() != 1 {
        return Err(invalid(format!("potential must have scalar output, got width {}", phi.output_dim())));
    }
    Ok(())
}

/// `grad_x phi(x)`.
pub fn potential_flow(phi: &ParamSet, x: &[f64]) -> Result<StateVec> {
    check_scalar(phi)?;
    let mut scratch = vec![0.0; phi.num_params()];
    phi.vjp_accumulate(x, &[1.0], &mut scratch)
}

/// The gradient field of a scalar network, as autonomous dynamics. Its
/// Jacobian is the Hessian of the potential, applied through a tangent pass.
#[derive(Debug, Clone, Copy)]
pub struct PotentialField<'a> {
    phi: &'a ParamSet,
}

impl<'a> PotentialField<'a> {
    pub fn new(phi: &'a ParamSet) -> Result<Self> {
        check_scalar(phi)?;
        Ok(Self { phi })
    }
}

impl Dynamics for PotentialField<'_> {
    fn dim(&self) -> usize {
        self.phi.input_dim()
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        potential_flow(self.phi, x).expect("width checked by caller")
    }
}

impl Jacobian for PotentialField<'_> {
    fn jvp(&self, x: &[f64], _t: f64, v: &[f64]) -> Vec<f64> {
        let pass = self.phi.tangent_forward(x, &[v.to_vec()]).expect("width");
        let mut scratch = vec![0.0; self.phi.num_params()];
        pass.backward(&[0.0], &[vec![1.0]], &mut scratch)
    }

    fn vjp(&self, x: &[f64], t: f64, cot: &[f64]) -> Vec<f64> {
        // The Hessian is symmetric.
        self.jvp(x, t, cot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetField};
    use crate::ode::LinearDynamics;
    use crate::rng::seeded;

    struct Rotation;

    impl Dynamics for Rotation {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
            vec![-x[1], x[0]]
        }
    }

    impl Jacobian for Rotation {
        fn jvp(&self, _x: &[f64], _t: f64, v: &[f64]) -> Vec<f64> {
            vec![-v[1], v[0]]
        }
        fn vjp(&self, _x: &[f64], _t: f64, c: &[f64]) -> Vec<f64> {
            vec![c[1], -c[0]]
        }
    }

    struct Constant;

    impl Dynamics for Constant {
        fn dim(&self) -> usize {
            3
        }
        fn eval(&self, _x: &[f64], _t: f64) -> Vec<f64> {
            vec![1.0, -2.0, 0.5]
        }
    }

    impl Jacobian for Constant {
        fn jvp(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
            vec![0.0; 3]
        }
        fn vjp(&self, _x: &[f64], _t: f64, _c: &[f64]) -> Vec<f64> {
            vec![0.0; 3]
        }
    }

    fn random_matrix(d: usize, seed: u64) -> LinearDynamics {
        let mut rng = seeded(seed);
        LinearDynamics::new(d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tanh_net(d: usize, seed: u64) -> ParamSet {
        ParamSet::random(&[d, 6, d], &[Activation::Tanh, Activation::Identity], &mut seeded(seed)).unwrap()
    }

    #[test]
    fn exact_divergence_simple_fields() {
        assert_eq!(divergence_exact(&Constant, &[0.1, 0.2, 0.3], 0.0).unwrap(), 0.0);
        let a = random_matrix(4, 2);
        let got = divergence_exact(&a, &[0.3, -0.2, 1.0, 0.0], 0.0).unwrap();
        assert!((got - a.trace()).abs() < 1e-14);
        assert!(divergence_exact(&a, &[0.3], 0.0).is_err());
    }

    #[test]
    fn exact_divergence_matches_finite_differences() {
        let net = tanh_net(3, 5);
        let field = NetField::new(&net).unwrap();
        let x = [0.2, -0.7, 0.4];
        let eps = 1e-5;
        let mut fd = 0.0;
        for i in 0..3 {
            let mut xp = x;
            xp[i] += eps;
            let mut xm = x;
            xm[i] -= eps;
            fd += (field.eval(&xp, 0.0)[i] - field.eval(&xm, 0.0)[i]) / (2.0 * eps);
        }
        assert!((divergence_exact(&field, &x, 0.0).unwrap() - fd).abs() < 1e-6);
    }

    #[test]
    fn hutchinson_exact_for_diagonal() {
        let a = LinearDynamics::diagonal(&[1.0, -2.5, 0.25]);
        let mut rng = seeded(1);
        for _ in 0..10 {
            let est = divergence_hutchinson(&a, &[0.0; 3], 0.0, 1, Probe::Rademacher, &mut rng).unwrap();
            assert_eq!(est, a.trace());
        }
    }

    #[test]
    fn hutchinson_unbiased() {
        let a = random_matrix(5, 9);
        let mut rng = seeded(10);
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| divergence_hutchinson(&a, &[0.0; 5], 0.0, 1, Probe::Rademacher, &mut rng).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let stderr = (var / n as f64).sqrt();
        assert!((mean - a.trace()).abs() < 3.0 * stderr);
    }

    #[test]
    fn basis_probes_give_exact_trace() {
        let net = tanh_net(4, 3);
        let field = NetField::new(&net).unwrap();
        let x = [0.1, 0.2, -0.3, 0.9];
        let exact = divergence_exact(&field, &x, 0.0).unwrap();
        let est = divergence_hutchinson(&field, &x, 0.0, 4, Probe::Basis, &mut seeded(0)).unwrap();
        assert!((est - exact).abs() < 1e-12);
        assert!(divergence_hutchinson(&field, &x, 0.0, 0, Probe::Basis, &mut seeded(0)).is_err());
    }

    #[test]
    fn rotation_preserves_logq() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let start = DensityState {
            x: vec![1.0, 0.5],
            logq: -1.25,
        };
        let end = transport(&start, &grid, &Rotation, Scheme::Rk4, TraceMode::Exact).unwrap();
        assert!((end.logq - start.logq).abs() < 1e-10);
    }

    #[test]
    fn constant_divergence_quadrature() {
        let (a, t) = (0.7, 2.0);
        let grid = TimeGrid::new(0.0, t, 50).unwrap();
        let start = DensityState { x: vec![0.3], logq: 0.1 };
        let end = transport(&start, &grid, &LinearDynamics::scalar(a), Scheme::Euler, TraceMode::Exact).unwrap();
        assert!((end.logq - (0.1 - a * t)).abs() < 1e-13);
    }

    #[test]
    fn gaussian_push_forward() {
        let t = 0.5;
        let grid = TimeGrid::new(0.0, t, 100).unwrap();
        let var = (2.0 * t).exp();
        let mut worst: f64 = 0.0;
        for i in 0..41 {
            let x0 = -4.0 + 0.2 * i as f64;
            let start = DensityState {
                x: vec![x0],
                logq: std_normal_logpdf(&[x0]),
            };
            let end = transport(&start, &grid, &LinearDynamics::scalar(1.0), Scheme::Rk4, TraceMode::Exact).unwrap();
            let y = end.x[0];
            let closed = -0.5 * (LN_2PI + var.ln() + y * y / var);
            worst = worst.max((end.logq - closed).abs());
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn hutchinson_transport_is_seeded() {
        let net = tanh_net(2, 4);
        let field = NetField::new(&net).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let start = DensityState {
            x: vec![0.2, 0.1],
            logq: 0.0,
        };
        let mode = TraceMode::Hutchinson { probes: 1, seed: 3 };
        let a = transport(&start, &grid, &field, Scheme::Rk4, mode).unwrap();
        let b = transport(&start, &grid, &field, Scheme::Rk4, mode).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transport_scheme_consistency() {
        let net = tanh_net(2, 6);
        let field = NetField::new(&net).unwrap();
        let start = DensityState {
            x: vec![0.5, -0.5],
            logq: 0.0,
        };
        let gap = |k: usize| {
            let grid = TimeGrid::new(0.0, 1.0, k).unwrap();
            let e = transport(&start, &grid, &field, Scheme::Euler, TraceMode::Exact).unwrap();
            let r = transport(&start, &grid, &field, Scheme::Rk4, TraceMode::Exact).unwrap();
            (e.logq - r.logq).abs()
        };
        let ratio = gap(40) / gap(80);
        assert!((1.6..2.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn cnf_zero_field_is_base_density() {
        let zero = LinearDynamics::diagonal(&[0.0, 0.0]);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let x = [0.3, -1.2];
        let ll = cnf_loglik(&x, &grid, &zero, Scheme::Rk4, TraceMode::Exact).unwrap();
        assert_eq!(ll, std_normal_logpdf(&x));
    }

    #[test]
    fn cnf_linear_change_of_variables() {
        let (a, t) = (0.4, 1.0);
        let grid = TimeGrid::new(0.0, t, 100).unwrap();
        let f = LinearDynamics::scalar(a);
        for x in [-2.0, 0.0, 0.7, 3.0] {
            let ll = cnf_loglik(&[x], &grid, &f, Scheme::Rk4, TraceMode::Exact).unwrap();
            let want = std_normal_logpdf(&[x * (-a * t).exp()]) - a * t;
            assert!((ll - want).abs() < 1e-9);
        }
    }

    #[test]
    fn cnf_density_normalizes() {
        let net = ParamSet::random(&[1, 8, 1], &[Activation::Tanh, Activation::Identity], &mut seeded(12)).unwrap();
        let field = NetField::new(&net).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let n = 1601;
        let h = 16.0 / (n - 1) as f64;
        let dens: Vec<f64> = (0..n)
            .map(|i| {
                let x = -8.0 + h * i as f64;
                cnf_loglik(&[x], &grid, &field, Scheme::Rk4, TraceMode::Exact).unwrap().exp()
            })
            .collect();
        let total = h * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[n - 1]));
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn potential_of_linear_and_constant_networks() {
        let phi = ParamSet::from_flat(&[2, 1], &[Activation::Identity], vec![0.5, -1.5, 0.3]).unwrap();
        assert_eq!(potential_flow(&phi, &[4.0, 2.0]).unwrap(), vec![0.5, -1.5]);
        let flat = ParamSet::from_flat(&[2, 1], &[Activation::Identity], vec![0.0, 0.0, 2.0]).unwrap();
        assert_eq!(potential_flow(&flat, &[4.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let wide = tanh_net(2, 1);
        assert!(potential_flow(&wide, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn potential_flow_is_curl_free() {
        let phi = ParamSet::random(&[3, 8, 1], &[Activation::Tanh, Activation::Identity], &mut seeded(2)).unwrap();
        let field = PotentialField::new(&phi).unwrap();
        let x = [0.3, -0.4, 0.8];
        let eps = 1e-5;
        let mut jac = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut xp = x;
            xp[j] += eps;
            let mut xm = x;
            xm[j] -= eps;
            let (fp, fm) = (field.eval(&xp, 0.0), field.eval(&xm, 0.0));
            for i in 0..3 {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * eps);
            }
        }
        for i in 0..3 {
            for j in 0..i {
                assert!((jac[i][j] - jac[j][i]).abs() < 1e-6);
            }
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let hv = field.jvp(&x, 0.0, &e);
            for j in 0..3 {
                assert!((hv[j] - jac[j][i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let csv = samples_csv(&[DensityState {
            x: vec![0.5, -1.0],
            logq: -2.0,
        }]);
        assert_eq!(csv, "sample_id,x0,x1,logq\n0,0.5,-1.0,-2.0\n");
    }
}
