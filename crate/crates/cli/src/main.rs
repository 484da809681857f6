mod commands;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use commands::{cnf, gradcheck, integrate, mpf, train};
use run::{read_config_file, resolve, RunManifest, UsageError};

#[derive(Parser)]
#[command(name = "odeflow", version, about = "ODE solvers, optimal-control training and particle flows")]
struct Cli {
    /// Master seed; every random draw derives from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON file of config values; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate a fixed ODE and write its trajectory
    Integrate(integrate::IntegrateArgs),
    /// Train a residual classifier on separable blobs
    Train(train::TrainArgs),
    /// Compare adjoint, backprop-through-solver and finite-difference gradients
    Gradcheck(gradcheck::GradcheckArgs),
    /// Sample from and score a continuous normalizing flow
    Cnf(cnf::CnfArgs),
    /// Sequential Bayesian inference with a meta-learned particle flow
    #[command(subcommand)]
    Mpf(MpfCmd),
    /// Re-run a command from its manifest.json
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Subcommand)]
enum MpfCmd {
    /// Generate a suite of conjugate Gaussian tasks
    GenTasks(mpf::GenArgs),
    /// Meta-train the flow on a task suite
    Train(mpf::MpfTrainArgs),
    /// Push particles through every stage and dump them
    Infer(mpf::InferArgs),
    /// Compare particle moments with the exact posteriors
    Eval(mpf::EvalArgs),
}

fn config<C, F>(cli: &Cli, flags: &F) -> Result<serde_json::Value>
where
    C: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let file = cli.config.as_deref().map(read_config_file).transpose()?;
    let cfg: C = resolve(file.as_ref(), flags, cli.seed)?;
    Ok(serde_json::to_value(cfg)?)
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        run::require(n >= 1, "threads", "must be at least 1")?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (name, cfg) = match &cli.command {
        Cmd::Integrate(a) => ("integrate", config::<integrate::IntegrateConfig, _>(cli, a)?),
        Cmd::Train(a) => ("train", config::<train::TrainConfig, _>(cli, a)?),
        Cmd::Gradcheck(a) => ("gradcheck", config::<gradcheck::GradcheckConfig, _>(cli, a)?),
        Cmd::Cnf(a) => ("cnf", config::<cnf::CnfConfig, _>(cli, a)?),
        Cmd::Mpf(MpfCmd::GenTasks(a)) => ("mpf gen-tasks", config::<mpf::GenConfig, _>(cli, a)?),
        Cmd::Mpf(MpfCmd::Train(a)) => ("mpf train", config::<mpf::MpfTrainConfig, _>(cli, a)?),
        Cmd::Mpf(MpfCmd::Infer(a)) => ("mpf infer", config::<mpf::InferConfig, _>(cli, a)?),
        Cmd::Mpf(MpfCmd::Eval(a)) => ("mpf eval", config::<mpf::InferConfig, _>(cli, a)?),
        Cmd::Replay { manifest } => {
            let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| run::usage(format!("--manifest {}: {e}", manifest.display())))?;
            return commands::execute(&m.command, m.config, &cli.out);
        }
    };
    commands::execute(name, cfg, &cli.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
