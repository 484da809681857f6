pub mod cnf;
pub mod gradcheck;
pub mod integrate;
pub mod mpf;
pub mod train;

use std::path::Path;

use anyhow::Result;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::run::{usage, RunDir};

trait Command: Serialize + DeserializeOwned {
    fn seed(&self) -> u64;

    /// Normalises the config before it is recorded in the manifest.
    fn prepare(&mut self) -> Result<()> {
        Ok(())
    }

    fn run(&self, out: &mut RunDir) -> Result<()>;
}

macro_rules! command {
    ($cfg:ty, $run:path) => {
        command!($cfg, $run, |_c: &mut $cfg| Ok(()));
    };
    ($cfg:ty, $run:path, $prep:expr) => {
        impl Command for $cfg {
            fn seed(&self) -> u64 {
                self.seed
            }
            fn prepare(&mut self) -> Result<()> {
                $prep(self)
            }
            fn run(&self, out: &mut RunDir) -> Result<()> {
                $run(self, out)
            }
        }
    };
}

command!(integrate::IntegrateConfig, integrate::run);
command!(train::TrainConfig, train::run);
command!(gradcheck::GradcheckConfig, gradcheck::run);
command!(cnf::CnfConfig, cnf::run);
command!(mpf::GenConfig, mpf::gen_tasks);
command!(mpf::MpfTrainConfig, mpf::train, |c: &mut mpf::MpfTrainConfig| c.pin_paths());

/// `mpf infer` and `mpf eval` share a config type but not a runner.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
struct Eval(mpf::InferConfig);

command!(mpf::InferConfig, mpf::infer, |c: &mut mpf::InferConfig| c.pin_paths());

impl Command for Eval {
    fn seed(&self) -> u64 {
        self.0.seed
    }
    fn prepare(&mut self) -> Result<()> {
        self.0.pin_paths()
    }
    fn run(&self, out: &mut RunDir) -> Result<()> {
        mpf::eval(&self.0, out)
    }
}

fn go<C: Command>(command: &str, config: Value, out: &Path) -> Result<()> {
    let mut cfg: C = serde_json::from_value(config).map_err(|e| usage(format!("invalid configuration: {e}")))?;
    cfg.prepare()?;
    let mut dir = RunDir::create(out)?;
    cfg.run(&mut dir)?;
    dir.finish(command, &cfg, cfg.seed())
}

/// Runs a command from a fully resolved config snapshot. Fresh runs and
/// manifest replays both come through here.
pub fn execute(command: &str, config: Value, out: &Path) -> Result<()> {
    match command {
        "integrate" => go::<integrate::IntegrateConfig>(command, config, out),
        "train" => go::<train::TrainConfig>(command, config, out),
        "gradcheck" => go::<gradcheck::GradcheckConfig>(command, config, out),
        "cnf" => go::<cnf::CnfConfig>(command, config, out),
        "mpf gen-tasks" => go::<mpf::GenConfig>(command, config, out),
        "mpf train" => go::<mpf::MpfTrainConfig>(command, config, out),
        "mpf infer" => go::<mpf::InferConfig>(command, config, out),
        "mpf eval" => go::<Eval>(command, config, out),
        other => Err(usage(format!("unknown command '{other}'"))),
    }
}
