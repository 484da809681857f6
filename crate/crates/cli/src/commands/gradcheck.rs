use anyhow::{bail, Result};
use clap::Args;
use odeflow::adjoint::{adjoint_gradient, backprop_through_solver, half_square, MlpField, ParametricDynamics, ScalarLinear};
use odeflow::nn::{grad_check_flat, relative_error};
use odeflow::ode::integrate_final;
use odeflow::rng::{mix, seeded};
use odeflow::{Activation, ParamSet, Scheme, TimeGrid};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::commands::integrate::parse_scheme;
use crate::output::{num, row};
use crate::run::{require, RunDir};

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// linear (x' = a x) or tanh (random 4-d network field)
    #[arg(long)]
    case: Option<String>,
    /// euler or rk4
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    t1: Option<f64>,
    /// Finite-difference step
    #[arg(long)]
    eps: Option<f64>,
    /// Exit with status 1 if any relative error exceeds this
    #[arg(long)]
    threshold: Option<f64>,
    /// Growth rate of the linear case
    #[arg(long, allow_negative_numbers = true)]
    a: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub case: String,
    pub scheme: String,
    pub steps: usize,
    pub t1: f64,
    pub eps: f64,
    pub threshold: f64,
    pub a: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            case: "tanh".into(),
            scheme: "rk4".into(),
            steps: 200,
            t1: 1.0,
            eps: 1e-5,
            threshold: 1e-4,
            a: 0.3,
            seed: 0,
        }
    }
}

pub fn run(cfg: &GradcheckConfig, out: &mut RunDir) -> Result<()> {
    let scheme = parse_scheme(&cfg.scheme, 1.0)?;
    require(matches!(scheme, Scheme::Euler | Scheme::Rk4), "scheme", "must be euler or rk4")?;
    require(cfg.steps >= 1, "steps", "must be at least 1")?;
    require(cfg.t1 > 0.0, "t1", "must be positive")?;
    require(cfg.eps > 0.0 && cfg.eps.is_finite(), "eps", "must be positive")?;
    require(cfg.threshold > 0.0, "threshold", "must be positive")?;
    let grid = TimeGrid::new(0.0, cfg.t1, cfg.steps)?;

    let report = match cfg.case.as_str() {
        "linear" => compare(&ScalarLinear::new(cfg.a), &[1.0], &grid, scheme, cfg.eps)?,
        "tanh" => {
            let mut rng = seeded(cfg.seed);
            let net = ParamSet::random(&[4, 4, 4], &[Activation::Tanh, Activation::Identity], &mut rng)?;
            let mut xr = seeded(mix(cfg.seed, 1));
            let x0: Vec<f64> = (0..4).map(|_| xr.random_range(-1.0..1.0)).collect();
            compare(&MlpField::new(net)?, &x0, &grid, scheme, cfg.eps)?
        }
        other => return Err(crate::run::usage(format!("--case: unknown case '{other}'"))),
    };

    let mut csv = row(["check".to_string(), "max_rel_err".to_string()]);
    let mut worst: f64 = 0.0;
    for (name, err) in &report {
        csv.push_str(&row([name.to_string(), num(*err)]));
        println!("{name:<22} {err:.3e}");
        worst = worst.max(*err);
    }
    out.write("gradcheck.csv", &csv)?;
    if !(worst <= cfg.threshold) {
        bail!("worst relative error {worst:.3e} exceeds threshold {:.3e}", cfg.threshold);
    }
    Ok(())
}

fn compare<D: ParametricDynamics>(
    f: &D,
    x0: &[f64],
    grid: &TimeGrid,
    scheme: Scheme,
    eps: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let adj = adjoint_gradient(x0, grid, f, scheme, half_square)?;
    let disc = backprop_through_solver(x0, grid, f, scheme, half_square)?;
    let fd_against = |grad: &[f64]| {
        let objective = |w: &[f64]| {
            let g = f.with_params(w).expect("same parameter count");
            let xt = integrate_final(x0, grid, &g, scheme).expect("solve succeeded at the base point");
            (half_square(&xt).0, grad.to_vec())
        };
        grad_check_flat(f.params(), objective, eps)
    };
    let between = adj
        .dw
        .values()
        .iter()
        .zip(disc.dw.values())
        .chain(adj.dx0.iter().zip(&disc.dx0))
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max);
    Ok(vec![
        ("adjoint_vs_fd", fd_against(adj.dw.values())?),
        ("backprop_vs_fd", fd_against(disc.dw.values())?),
        ("adjoint_vs_backprop", between),
    ])
}
