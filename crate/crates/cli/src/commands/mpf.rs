use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use odeflow::density::TraceMode;
use odeflow::mpf::{
    eval_csv, evaluate, meta_train_with, mpf_sequential, task_generate, FlowConfig, FlowVelocityNet, GradOptions,
    InferenceTask, MetaTrainConfig, MpfBundle, ObsFeature, Optimizer, TaskFamily,
    TaskRanges,
};
use odeflow::rng::{mix, seeded};
use serde::{Deserialize, Serialize};

use crate::output::{line_chart, num, row};
use crate::run::{absolute, require, usage, RunDir};

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    /// gauss1d or gauss-nd
    #[arg(long)]
    family: Option<String>,
    /// Dimension of gauss-nd tasks
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Observations per task
    #[arg(long)]
    observations: Option<usize>,
    /// Prior variance range, "lo,hi"
    #[arg(long = "prior-var", value_delimiter = ',', num_args = 1..=2)]
    prior_var: Option<Vec<f64>>,
    /// Likelihood variance range, "lo,hi"
    #[arg(long = "lik-var", value_delimiter = ',', num_args = 1..=2)]
    lik_var: Option<Vec<f64>>,
    /// Fixed observation sequence instead of sampled ones: stages separated
    /// by ';', coordinates by ','
    #[arg(long, allow_negative_numbers = true)]
    obs: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub family: String,
    pub dim: usize,
    pub count: usize,
    pub observations: usize,
    pub prior_var: Vec<f64>,
    pub lik_var: Vec<f64>,
    pub obs: Option<String>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            family: "gauss1d".into(),
            dim: 1,
            count: 20,
            observations: 3,
            prior_var: vec![0.5, 2.0],
            lik_var: vec![1.0, 1.0],
            obs: None,
            seed: 0,
        }
    }
}

fn range(v: &[f64], flag: &str) -> Result<(f64, f64)> {
    let r = match v {
        [x] => (*x, *x),
        [lo, hi] => (*lo, *hi),
        _ => return Err(usage(format!("--{flag} takes one value or 'lo,hi'"))),
    };
    require(r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite(), flag, "must satisfy 0 < lo <= hi")?;
    Ok(r)
}

fn parse_obs(text: &str, d: usize) -> Result<Vec<Vec<f64>>> {
    let stages: Vec<&str> = if d == 1 && !text.contains(';') {
        text.split(',').collect()
    } else {
        text.split(';').collect()
    };
    stages
        .iter()
        .map(|s| {
            let v = s
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| usage(format!("--obs: {e}")))?;
            require(v.len() == d, "obs", "entries must match the task dimension")?;
            Ok(v)
        })
        .collect()
}

pub fn gen_tasks(cfg: &GenConfig, out: &mut RunDir) -> Result<()> {
    let family = match cfg.family.as_str() {
        "gauss1d" => TaskFamily::Gauss1d,
        "gauss-nd" => {
            require(cfg.dim >= 1, "dim", "must be at least 1")?;
            TaskFamily::GaussNd { dim: cfg.dim }
        }
        other => return Err(usage(format!("--family: unknown family '{other}'"))),
    };
    let d = match family {
        TaskFamily::Gauss1d => 1,
        TaskFamily::GaussNd { dim } => dim,
    };
    let prior_var = range(&cfg.prior_var, "prior-var")?;
    let lik_var = range(&cfg.lik_var, "lik-var")?;
    let tasks = match &cfg.obs {
        None => task_generate(
            family,
            cfg.count,
            TaskRanges {
                prior_var,
                lik_var,
                observations: cfg.observations,
            },
            cfg.seed,
        )?,
        Some(text) => {
            let obs = parse_obs(text, d)?;
            // Variances still follow the ranges; only the observations are pinned.
            let sampled = task_generate(
                family,
                cfg.count,
                TaskRanges {
                    prior_var,
                    lik_var,
                    observations: 0,
                },
                cfg.seed,
            )?;
            sampled
                .into_iter()
                .map(|t| InferenceTask::new(t.prior, t.likelihood, obs.clone(), None))
                .collect::<odeflow::Result<Vec<_>>>()?
        }
    };
    out.write("tasks.json", &serde_json::to_string_pretty(&tasks)?)?;
    println!("wrote {} tasks", tasks.len());
    Ok(())
}

fn load_tasks(path: &PathBuf) -> Result<Vec<InferenceTask>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tasks: Vec<InferenceTask> =
        serde_json::from_str(&text).map_err(|e| usage(format!("--tasks {}: {e}", path.display())))?;
    Ok(tasks)
}

fn load_model(path: &PathBuf) -> Result<MpfBundle> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    MpfBundle::from_json(&text).map_err(|e| usage(format!("--model {}: {e}", path.display())))
}

fn parse_feature(name: &str) -> Result<ObsFeature> {
    match name {
        "raw" => Ok(ObsFeature::Raw),
        "likelihood-gradient" => Ok(ObsFeature::LikelihoodGradient),
        other => Err(usage(format!("--feature: unknown feature '{other}'"))),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MpfTrainArgs {
    /// Task suite written by gen-tasks
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial step size
    #[arg(long)]
    step: Option<f64>,
    /// Step size at the last update (cosine schedule)
    #[arg(long = "final-step")]
    final_step: Option<f64>,
    #[arg(long)]
    particles: Option<usize>,
    /// Euler steps per stage
    #[arg(long)]
    steps: Option<usize>,
    /// Flow time per stage
    #[arg(long)]
    horizon: Option<f64>,
    /// raw or likelihood-gradient
    #[arg(long)]
    feature: Option<String>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// adam or sgd
    #[arg(long)]
    optimizer: Option<String>,
    /// Stop gradients between stages
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    detach: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpfTrainConfig {
    pub tasks: Option<PathBuf>,
    pub epochs: usize,
    pub step: f64,
    pub final_step: f64,
    pub particles: usize,
    pub steps: usize,
    pub horizon: f64,
    pub feature: String,
    pub embed: usize,
    pub hidden: usize,
    pub optimizer: String,
    pub detach: bool,
    pub seed: u64,
}

impl Default for MpfTrainConfig {
    fn default() -> Self {
        Self {
            tasks: None,
            epochs: 100,
            step: 1e-2,
            final_step: 1e-4,
            particles: 100,
            steps: 10,
            horizon: 1.0,
            feature: "likelihood-gradient".into(),
            embed: 8,
            hidden: 32,
            optimizer: "adam".into(),
            detach: false,
            seed: 0,
        }
    }
}

impl MpfTrainConfig {
    /// Pins input paths so the manifest replays from any directory.
    pub fn pin_paths(&mut self) -> Result<()> {
        if let Some(p) = &self.tasks {
            self.tasks = Some(absolute(p)?);
        }
        Ok(())
    }
}

pub fn train(cfg: &MpfTrainConfig, out: &mut RunDir) -> Result<()> {
    let tasks_path = cfg.tasks.as_ref().ok_or_else(|| usage("--tasks is required"))?;
    require(cfg.particles >= 2, "particles", "must be at least 2")?;
    require(cfg.steps >= 1, "steps", "must be at least 1")?;
    require(cfg.horizon > 0.0, "horizon", "must be positive")?;
    require(cfg.embed >= 1 && cfg.hidden >= 1, "hidden", "and --embed must be at least 1")?;
    require(cfg.step >= 0.0 && cfg.final_step >= 0.0, "step", "and --final-step must be non-negative")?;
    let optimizer = match cfg.optimizer.as_str() {
        "adam" => Optimizer::adam(),
        "sgd" => Optimizer::Sgd,
        other => return Err(usage(format!("--optimizer: unknown optimizer '{other}'"))),
    };
    let feature = parse_feature(&cfg.feature)?;
    let suite = load_tasks(tasks_path)?;
    require(!suite.is_empty(), "tasks", "file holds no tasks")?;
    let d = suite[0].dim();
    require(suite.iter().all(|t| t.dim() == d), "tasks", "must all have the same dimension")?;

    let flow = FlowConfig {
        particles: cfg.particles,
        horizon: cfg.horizon,
        steps: cfg.steps,
        feature,
    };
    let grid = flow.grid()?;
    let net0 = FlowVelocityNet::random(d, cfg.embed, cfg.hidden, feature, &mut seeded(mix(cfg.seed, 3)))?;
    let train_cfg = MetaTrainConfig {
        epochs: cfg.epochs,
        step: cfg.step,
        final_step: cfg.final_step,
        particles: cfg.particles,
        optimizer,
        grad: GradOptions {
            detach_stages: cfg.detach,
        },
        seed: cfg.seed,
    };
    let outcome = meta_train_with(&suite, &net0, &grid, &train_cfg, |epoch, loss| {
        eprintln!("epoch {epoch:>4}  loss {loss:.4}");
    })?;

    out.write("model.json", &MpfBundle::new(&outcome.net, flow).to_json()?)?;
    let mut csv = row(["epoch".to_string(), "mean_loss".to_string()]);
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        csv.push_str(&row([e.to_string(), num(*l)]));
    }
    out.write("train_loss.csv", &csv)?;
    let pts: Vec<(f64, f64)> = outcome.epoch_losses.iter().enumerate().map(|(e, l)| (e as f64, *l)).collect();
    out.write("loss.svg", &line_chart("meta-training loss", "epoch", &[("mean loss", pts)]))?;
    println!(
        "{} updates; mean loss {:.4} -> {:.4}",
        outcome.iterations,
        outcome.epoch_losses.first().copied().unwrap_or(f64::NAN),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// Trained model; without it an untrained (identity) flow is used
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub model: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub particles: Option<usize>,
    pub seed: u64,
}

impl InferConfig {
    pub fn pin_paths(&mut self) -> Result<()> {
        for p in [&mut self.model, &mut self.tasks].into_iter().flatten() {
            *p = absolute(p)?;
        }
        Ok(())
    }
}

fn model_or_identity(model: &Option<PathBuf>, d: usize, seed: u64) -> Result<(FlowVelocityNet, FlowConfig)> {
    match model {
        Some(p) => {
            let bundle = load_model(p)?;
            let net = bundle.net()?;
            require(net.dim() == d, "model", "dimension does not match the tasks")?;
            Ok((net, bundle.config))
        }
        None => {
            let net = FlowVelocityNet::random(d, 8, 32, ObsFeature::Raw, &mut seeded(mix(seed, 3)))?;
            Ok((net, FlowConfig::default()))
        }
    }
}

pub fn infer(cfg: &InferConfig, out: &mut RunDir) -> Result<()> {
    let tasks_path = cfg.tasks.as_ref().ok_or_else(|| usage("--tasks is required"))?;
    let suite = load_tasks(tasks_path)?;
    require(!suite.is_empty(), "tasks", "file holds no tasks")?;
    let (net, flow) = model_or_identity(&cfg.model, suite[0].dim(), cfg.seed)?;
    let n = cfg.particles.unwrap_or(flow.particles);
    require(n >= 2, "particles", "must be at least 2")?;
    let grid = flow.grid()?;

    let d = net.dim();
    let mut csv = row(["task_id", "stage", "particle_id"]
        .map(String::from)
        .into_iter()
        .chain((0..d).map(|k| format!("x{k}")))
        .chain(std::iter::once("logq".to_string())));
    for (i, task) in suite.iter().enumerate() {
        let stages = mpf_sequential(task, &net, n, &grid, mix(cfg.seed, i as u64), TraceMode::Exact)?;
        for ps in &stages {
            for (p, (x, lq)) in ps.particles().zip(ps.logq()).enumerate() {
                csv.push_str(&row([i.to_string(), ps.stage().to_string(), p.to_string()]
                    .into_iter()
                    .chain(x.iter().map(|v| num(*v)))
                    .chain(std::iter::once(num(*lq)))));
            }
        }
    }
    out.write("particles.csv", &csv)?;
    let rows = evaluate(&suite, &net, n, &grid, cfg.seed)?;
    out.write("stats.csv", &eval_csv(&rows))?;
    println!("{} tasks, {} particles per stage", suite.len(), n);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    particles: Option<usize>,
}

pub fn eval(cfg: &InferConfig, out: &mut RunDir) -> Result<()> {
    let tasks_path = cfg.tasks.as_ref().ok_or_else(|| usage("--tasks is required"))?;
    require(cfg.model.is_some(), "model", "is required")?;
    let suite = load_tasks(tasks_path)?;
    require(!suite.is_empty(), "tasks", "file holds no tasks")?;
    let (net, flow) = model_or_identity(&cfg.model, suite[0].dim(), cfg.seed)?;
    let n = cfg.particles.unwrap_or(flow.particles);
    require(n >= 2, "particles", "must be at least 2")?;
    let rows = evaluate(&suite, &net, n, &flow.grid()?, cfg.seed)?;
    out.write("eval.csv", &eval_csv(&rows))?;

    let (mut rel, mut count) = (0.0, 0usize);
    for r in rows.iter().filter(|r| r.stage > 0) {
        for (v, t) in r.particle_var.iter().zip(&r.true_post_var) {
            rel += (v - t).abs() / t;
            count += 1;
        }
    }
    println!("mean |particle_var - true_post_var| / true_post_var = {:.4}", rel / count.max(1) as f64);
    Ok(())
}
