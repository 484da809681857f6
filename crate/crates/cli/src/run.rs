use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A bad flag or config value. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Fails with a usage error naming `flag` unless `ok`.
pub fn require(ok: bool, flag: &str, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(usage(format!("--{flag} {what}")))
    }
}

/// Built-in defaults, overlaid by the config file, overlaid by flags.
pub fn resolve<C, F>(file: Option<&Value>, flags: &F, seed: Option<u64>) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut merged = serde_json::to_value(C::default())?;
    if let Some(file) = file {
        overlay(&mut merged, file);
    }
    overlay(&mut merged, &serde_json::to_value(flags)?);
    if let Some(seed) = seed {
        merged["seed"] = Value::from(seed);
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn overlay(base: &mut Value, top: &Value) {
    if let (Value::Object(b), Value::Object(t)) = (base, top) {
        for (k, v) in t {
            if !v.is_null() {
                b.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(usage("--config must hold a JSON object"));
    }
    Ok(v)
}

/// Output directory plus the list of files written so far.
pub struct RunDir {
    dir: PathBuf,
    outputs: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.dir.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn finish<C: Serialize>(self, command: &str, config: &C, seed: u64) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            versions: Versions {
                tool: env!("CARGO_PKG_VERSION").to_string(),
                manifest: MANIFEST_FORMAT.to_string(),
            },
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        write_atomic(&self.dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
    }
}

pub const MANIFEST_FORMAT: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
pub struct Versions {
    pub tool: String,
    pub manifest: String,
}

/// Everything needed to re-run a command bit for bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub versions: Versions,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Absolute form of an input path, so a manifest can be replayed from
/// anywhere.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))
}
