use anyhow::Result;
use clap::Args;
use odeflow::density::{cnf_loglik, cnf_sample, samples_csv, DensityState, TraceMode};
use odeflow::nn::NetField;
use odeflow::ode::{Jacobian, LinearDynamics};
use odeflow::rng::{mix, seeded};
use odeflow::{Activation, ParamSet, Scheme, TimeGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{num, row};
use crate::run::{require, usage, RunDir};

#[derive(Debug, Args, Serialize)]
pub struct CnfArgs {
    /// none (zero field), linear (x' = a x) or net (random tanh network)
    #[arg(long)]
    flow: Option<String>,
    /// Rate of the linear flow
    #[arg(long, allow_negative_numbers = true)]
    a: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// exact or hutchinson
    #[arg(long)]
    trace: Option<String>,
    /// Rademacher probes per divergence estimate
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    t1: Option<f64>,
    /// Hidden width of the network flow
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnfConfig {
    pub flow: String,
    pub a: f64,
    pub dim: usize,
    pub samples: usize,
    pub trace: String,
    pub probes: usize,
    pub steps: usize,
    pub t1: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for CnfConfig {
    fn default() -> Self {
        Self {
            flow: "net".into(),
            a: 0.5,
            dim: 1,
            samples: 100,
            trace: "exact".into(),
            probes: 1,
            steps: 50,
            t1: 1.0,
            hidden: 16,
            seed: 0,
        }
    }
}

pub fn run(cfg: &CnfConfig, out: &mut RunDir) -> Result<()> {
    require(cfg.dim >= 1, "dim", "must be at least 1")?;
    require(cfg.samples >= 1, "samples", "must be at least 1")?;
    require(cfg.steps >= 1, "steps", "must be at least 1")?;
    require(cfg.t1 > 0.0, "t1", "must be positive")?;
    require(cfg.probes >= 1, "probes", "must be at least 1")?;
    let grid = TimeGrid::new(0.0, cfg.t1, cfg.steps)?;
    let hutchinson = match cfg.trace.as_str() {
        "exact" => false,
        "hutchinson" => true,
        other => return Err(usage(format!("--trace: unknown trace mode '{other}'"))),
    };
    match cfg.flow.as_str() {
        "none" => emit(cfg, &LinearDynamics::diagonal(&vec![0.0; cfg.dim]), &grid, hutchinson, out),
        "linear" => emit(cfg, &LinearDynamics::diagonal(&vec![cfg.a; cfg.dim]), &grid, hutchinson, out),
        "net" => {
            require(cfg.hidden >= 1, "hidden", "must be at least 1")?;
            let net = ParamSet::random(
                &[cfg.dim, cfg.hidden, cfg.dim],
                &[Activation::Tanh, Activation::Identity],
                &mut seeded(mix(cfg.seed, 7)),
            )?;
            emit(cfg, &NetField::new(&net)?, &grid, hutchinson, out)
        }
        other => Err(usage(format!("--flow: unknown flow '{other}'"))),
    }
}

fn emit<D: Jacobian + Sync>(cfg: &CnfConfig, f: &D, grid: &TimeGrid, hutchinson: bool, out: &mut RunDir) -> Result<()> {
    let mode = |seed: u64| {
        if hutchinson {
            TraceMode::Hutchinson {
                probes: cfg.probes,
                seed,
            }
        } else {
            TraceMode::Exact
        }
    };
    let samples = cnf_sample(cfg.samples, grid, f, Scheme::Rk4, mode(cfg.seed), cfg.seed)?;
    let loglik = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| cnf_loglik(&s.x, grid, f, Scheme::Rk4, mode(mix(mix(cfg.seed, 2), i as u64))))
        .collect::<odeflow::Result<Vec<f64>>>()?;
    out.write("samples.csv", &samples_csv(&samples))?;
    out.write("loglik.csv", &loglik_csv(&samples, &loglik))?;
    let mean = loglik.iter().sum::<f64>() / loglik.len() as f64;
    println!("{} samples through '{}' flow; mean log-likelihood {mean:.6}", samples.len(), cfg.flow);
    Ok(())
}

fn loglik_csv(samples: &[DensityState], loglik: &[f64]) -> String {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut s = row(std::iter::once("sample_id".to_string())
        .chain((0..d).map(|k| format!("x{k}")))
        .chain(std::iter::once("loglik".to_string())));
    for (i, (smp, ll)) in samples.iter().zip(loglik).enumerate() {
        s.push_str(&row(std::iter::once(i.to_string())
            .chain(smp.x.iter().map(|v| num(*v)))
            .chain(std::iter::once(num(*ll)))));
    }
    s
}
