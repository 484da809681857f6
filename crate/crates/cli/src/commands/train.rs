use anyhow::Result;
use clap::Args;
use odeflow::control::{blobs, history_csv, msa_train, sgd_train, ControlPath, LayerMap, MsaMode, Regularizer, TrainOutcome};
use odeflow::rng::{mix, seeded};
use serde::{Deserialize, Serialize};

use crate::output::line_chart;
use crate::run::{require, usage, RunDir};

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// sgd, msa (inner ascent), msa-grad (one ascent step) or msa-discrete
    /// (ternary weights)
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    /// Number of layers
    #[arg(long)]
    depth: Option<usize>,
    /// Residual step of each layer
    #[arg(long)]
    h: Option<f64>,
    /// Weight of the L2 running cost
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long = "inner-steps")]
    inner_steps: Option<usize>,
    /// Initial drift penalty of msa-discrete (0 for the bare argmax)
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: String,
    pub iters: usize,
    pub step: f64,
    pub depth: usize,
    pub h: f64,
    pub delta: f64,
    pub per_class: usize,
    pub margin: f64,
    pub inner_steps: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: "sgd".into(),
            iters: 500,
            step: 0.5,
            depth: 3,
            h: 0.5,
            delta: 0.0,
            per_class: 50,
            margin: 0.2,
            inner_steps: 5,
            rho: 0.5,
            seed: 0,
        }
    }
}

pub fn run(cfg: &TrainConfig, out: &mut RunDir) -> Result<()> {
    require(cfg.iters >= 1, "iters", "must be at least 1")?;
    require(cfg.depth >= 1, "depth", "must be at least 1")?;
    require(cfg.per_class >= 1, "per-class", "must be at least 1")?;
    require(cfg.step >= 0.0 && cfg.step.is_finite(), "step", "must be a non-negative number")?;
    require(cfg.delta >= 0.0, "delta", "must be non-negative")?;
    require(cfg.rho >= 0.0 && cfg.rho.is_finite(), "rho", "must be non-negative")?;
    require(cfg.margin >= 0.0 && cfg.margin < 1.0, "margin", "must lie in [0, 1)")?;

    let batch = blobs(cfg.per_class, cfg.margin, cfg.seed);
    let mut rng = seeded(mix(cfg.seed, 1));
    let residual = LayerMap::Residual { h: cfg.h };
    let reg = Regularizer::L2;
    let outcome: TrainOutcome = match cfg.optimizer.as_str() {
        "sgd" => {
            let path = ControlPath::random(2, cfg.depth, residual, cfg.delta, reg, &mut rng)?;
            sgd_train(&batch, &path, cfg.iters, cfg.step)?
        }
        "msa-grad" => {
            let path = ControlPath::random(2, cfg.depth, residual, cfg.delta, reg, &mut rng)?;
            msa_train(&batch, &path, MsaMode::GradientStep, cfg.iters, cfg.step)?
        }
        "msa" => {
            let path = ControlPath::random(2, cfg.depth, residual, cfg.delta, reg, &mut rng)?;
            let mode = MsaMode::ArgmaxInnerAscent {
                inner_steps: cfg.inner_steps,
                lr_scale: 0.1,
            };
            msa_train(&batch, &path, mode, cfg.iters, cfg.step)?
        }
        "msa-discrete" => {
            let path = ControlPath::random_ternary(2, cfg.depth, LayerMap::Plain, cfg.delta, reg, &mut rng)?;
            msa_train(&batch, &path, MsaMode::DiscreteArgmax { rho: cfg.rho }, cfg.iters, cfg.step)?
        }
        other => return Err(usage(format!("--optimizer: unknown optimizer '{other}'"))),
    };

    out.write("loss.csv", &history_csv(&outcome.history))?;
    out.write("model.json", &serde_json::to_string_pretty(&outcome.path)?)?;
    let loss: Vec<(f64, f64)> = outcome.history.iter().map(|r| (r.iter as f64, r.train_loss)).collect();
    let err: Vec<(f64, f64)> = outcome.history.iter().map(|r| (r.iter as f64, r.train_err)).collect();
    out.write(
        "loss.svg",
        &line_chart(&format!("{} on blobs", cfg.optimizer), "iteration", &[("train loss", loss), ("train error", err)]),
    )?;
    let last = outcome.history.last().expect("at least one row");
    println!(
        "{}: final loss {:.6}, train error {:.4}, max PMP residual {:.3e}, sparsity {:.3}",
        cfg.optimizer, last.train_loss, last.train_err, last.pmp_residual_max, last.sparsity
    );
    Ok(())
}
