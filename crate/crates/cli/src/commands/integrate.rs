use anyhow::Result;
use clap::Args;
use odeflow::nn::NetField;
use odeflow::ode::{integrate, Dynamics, ImplicitOptions, LinearDynamics};
use odeflow::rng::seeded;
use odeflow::{Activation, ParamSet, Scheme, TimeGrid, Trajectory};
use serde::{Deserialize, Serialize};

use crate::output::{num, row};
use crate::run::{require, usage, RunDir};

#[derive(Debug, Args, Serialize)]
pub struct IntegrateArgs {
    /// euler, rk4, backward-euler, lm2 or leapfrog
    #[arg(long)]
    scheme: Option<String>,
    /// Mixing weight of the lm2 scheme
    #[arg(long = "lm2-k")]
    lm2_k: Option<f64>,
    /// expo (x' = x), decay (x' = -x), stiff (x' = -50 x), oscillator
    /// (2-D rotation) or tanh-net (random network field)
    #[arg(long = "dyn")]
    dynamics: Option<String>,
    /// Initial state, comma separated
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    t0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    t1: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateConfig {
    pub scheme: String,
    pub lm2_k: f64,
    pub dynamics: String,
    pub x0: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for IntegrateConfig {
    fn default() -> Self {
        Self {
            scheme: "rk4".into(),
            lm2_k: 1.0,
            dynamics: "expo".into(),
            x0: vec![1.0],
            t0: 0.0,
            t1: 1.0,
            steps: 10,
            seed: 0,
        }
    }
}

pub fn parse_scheme(name: &str, lm2_k: f64) -> Result<Scheme> {
    Ok(match name {
        "euler" => Scheme::Euler,
        "rk4" => Scheme::Rk4,
        "backward-euler" => Scheme::BackwardEuler(ImplicitOptions::default()),
        "lm2" => Scheme::Lm2 { k: lm2_k },
        "leapfrog" => Scheme::Leapfrog,
        other => return Err(usage(format!("--scheme: unknown scheme '{other}'"))),
    })
}

fn validate(cfg: &IntegrateConfig) -> Result<(Scheme, TimeGrid)> {
    let scheme = parse_scheme(&cfg.scheme, cfg.lm2_k)?;
    require(cfg.steps >= 1, "steps", "must be at least 1")?;
    require(cfg.t0 < cfg.t1, "t1", "must be greater than --t0")?;
    require(!cfg.x0.is_empty(), "x0", "must not be empty")?;
    let grid = TimeGrid::new(cfg.t0, cfg.t1, cfg.steps).map_err(|e| usage(e.to_string()))?;
    Ok((scheme, grid))
}

pub fn run(cfg: &IntegrateConfig, out: &mut RunDir) -> Result<()> {
    let (scheme, grid) = validate(cfg)?;
    let d = cfg.x0.len();
    let traj = match cfg.dynamics.as_str() {
        "expo" | "decay" | "stiff" => {
            require(d == 1, "x0", "must have one entry for scalar dynamics")?;
            let lambda = match cfg.dynamics.as_str() {
                "expo" => 1.0,
                "decay" => -1.0,
                _ => -50.0,
            };
            solve(&cfg.x0, &grid, &LinearDynamics::scalar(lambda), scheme)?
        }
        "oscillator" => {
            require(d == 2, "x0", "must have two entries for the oscillator")?;
            let rot = LinearDynamics::new(2, vec![0.0, 1.0, -1.0, 0.0])?;
            solve(&cfg.x0, &grid, &rot, scheme)?
        }
        "tanh-net" => {
            let net = ParamSet::random(&[d, d], &[Activation::Tanh], &mut seeded(cfg.seed))?;
            solve(&cfg.x0, &grid, &NetField::new(&net)?, scheme)?
        }
        other => return Err(usage(format!("--dyn: unknown dynamics '{other}'"))),
    };
    out.write("trajectory.csv", &trajectory_csv(&traj))?;
    let last = traj.last();
    println!(
        "{} steps of {} on [{}, {}]; final state {}",
        cfg.steps,
        scheme.name(),
        cfg.t0,
        cfg.t1,
        last.iter().map(|v| num(*v)).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

fn solve<D: Dynamics>(x0: &[f64], grid: &TimeGrid, f: &D, scheme: Scheme) -> Result<Trajectory> {
    Ok(integrate(x0, grid, f, scheme)?)
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = row(std::iter::once("t".to_string()).chain((1..=traj.dim()).map(|i| format!("x{i}"))));
    for (k, x) in traj.states().enumerate() {
        s.push_str(&row(std::iter::once(num(traj.grid().time(k))).chain(x.iter().map(|v| num(*v)))));
    }
    s
}
