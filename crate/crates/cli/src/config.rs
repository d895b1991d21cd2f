//! Run configuration: a base profile, an optional JSON file merged over it,
//! then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rehearsal_core::data::SynthConfig;
use rehearsal_core::training::RunConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Usage;

/// Everything one JSON config file may hold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON config merged over the base profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Laptop-sized profile (d=16, d'=32, batch 32).
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Haar transform of the ego-predictor inputs.
    #[arg(long, value_enum)]
    pub haar: Option<Switch>,
    /// Number of final predictions K.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of rehearsals K_I.
    #[arg(long)]
    pub ki: Option<usize>,
    /// Weight of the ego loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Scene file name (without extension) kept out of training.
    #[arg(long = "held-out")]
    pub held_out: Option<String>,
    #[arg(long = "max-steps")]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Overwrites `base` with `over` key by key. Objects tagged with a `kind`
/// that differs are replaced whole; keys unknown to `base` are rejected.
fn merge(base: &mut Value, over: Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            if o.get("kind").is_some_and(|k| b.get("kind") != Some(k)) {
                *b = o;
                return Ok(());
            }
            for (k, v) in o {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Usage(format!("unknown config key {path}")).into()),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

impl ConfigArgs {
    /// Resolves the configuration on top of `base` (a checkpoint's, when
    /// resuming) or the full-scale or desk profile.
    pub fn resolve(&self, base: Option<&RunConfig>) -> Result<FileConfig> {
        let run = match base {
            Some(r) => r.clone(),
            None if self.desk => RunConfig::desk(),
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(FileConfig {
            run,
            synth: SynthConfig::default(),
        })?;
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let over: Value =
                serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?;
            merge(&mut value, over, "")?;
        }
        let mut cfg: FileConfig =
            serde_json::from_value(value).map_err(|e| Usage(format!("config: {e}")))?;
        self.apply(&mut cfg);
        cfg.run.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut FileConfig) {
        let run = &mut cfg.run;
        if let Some(s) = self.seed {
            run.train.seed = s;
        }
        if let Some(h) = self.haar {
            run.model.ego.haar = h == Switch::On;
        }
        if let Some(k) = self.k {
            run.model.fin.k = k;
        }
        if let Some(k) = self.ki {
            run.model.ego.k_i = k;
        }
        if let Some(l) = self.lambda {
            run.model.lambda = l;
        }
        if let Some(h) = &self.held_out {
            run.data.held_out = Some(h.clone());
        }
        if let Some(m) = self.max_steps {
            run.train.max_steps = Some(m);
        }
        if let Some(t) = self.threads {
            run.train.threads = Some(t);
        }
    }
}

pub fn config_path(args: &ConfigArgs) -> Option<String> {
    args.config
        .as_deref()
        .map(Path::display)
        .map(|d| d.to_string())
}
