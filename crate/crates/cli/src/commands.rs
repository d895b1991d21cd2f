use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use log::{info, warn};
use rehearsal_core::data::{synth_generate, write_ethucy, SceneWindow};
use rehearsal_core::evaluation::{
    analyze_activations, evaluate, insight_summary, kernel_intervention, rehearsal_intervention,
};
use rehearsal_core::model::ModelConfig;
use rehearsal_core::training::{
    load_checkpoint, log_to_jsonl, save_checkpoint, train, CheckpointManifest, MetricPoint,
    Precision, RunConfig,
};
use rehearsal_core::Scalar;

use crate::config::{config_path, ConfigArgs};
use crate::corpus::{load_scenes, split};
use crate::manifest::{hash_output, write_output, Artifact, RunManifest};
use crate::Usage;

const CHECKPOINT_FILES: [&str; 2] = ["manifest.json", "params.bin"];

fn checkpoint_artifacts(out: &Path, sub: &str) -> Result<Vec<Artifact>> {
    CHECKPOINT_FILES
        .iter()
        .map(|f| hash_output(out, &format!("{sub}/{f}")))
        .collect()
}

fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| rehearsal_core::Error::Checkpoint(format!("{}: {e}", p.display())).into())
}

fn input_checkpoint(dir: &Path) -> Result<Vec<Artifact>> {
    CHECKPOINT_FILES
        .iter()
        .map(|f| {
            let p = dir.join(f);
            let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Artifact::of_bytes(p.display().to_string(), &bytes))
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let seed = cfg.run.train.seed;
    let scenes = synth_generate(&cfg.synth, seed)?;
    if scenes.is_empty() {
        warn!("n_scenes is 0; writing an empty corpus");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut outputs = Vec::with_capacity(scenes.len());
    for s in &scenes {
        outputs.push(write_output(
            &a.out,
            &format!("{}.txt", s.name),
            write_ethucy(&s.records).as_bytes(),
        )?);
    }
    info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    RunManifest {
        command: "synth".into(),
        config_path: config_path(&a.cfg),
        seed,
        inputs: Vec::new(),
        outputs,
        config: serde_json::to_value(&cfg.synth)?,
    }
    .write(&a.out)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to continue from; its configuration is the base.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let prior = a
        .resume
        .as_deref()
        .map(read_checkpoint_manifest)
        .transpose()?;
    let run = a.cfg.resolve(prior.as_ref().map(|m| &m.config))?.run;
    if let Some(m) = &prior {
        if m.config.model != run.model {
            return Err(Usage(
                "the model configuration differs from the resumed checkpoint".into(),
            )
            .into());
        }
    }
    match run.train.precision {
        Precision::F32 => train_typed::<f32>(a, &run, prior),
        Precision::F64 => train_typed::<f64>(a, &run, prior),
    }
}

fn train_typed<T: Scalar>(
    a: &TrainArgs,
    run: &RunConfig,
    prior: Option<CheckpointManifest>,
) -> Result<()> {
    let (scenes, mut inputs) = load_scenes(&a.data, run)?;
    let (train_w, mut val_w) = split(&scenes, run.data.held_out.as_deref())?;
    if run.data.held_out.is_none() {
        warn!("no held-out scene; training without validation");
        val_w.clear();
    }
    let (store, mut history) = match (&a.resume, prior) {
        (Some(dir), Some(m)) => {
            inputs.extend(input_checkpoint(dir)?);
            (load_checkpoint::<T>(dir)?.0, m.metric_history)
        }
        _ => (run.model.init_params::<T>(run.train.seed)?, Vec::new()),
    };
    info!(
        "training on {} windows ({} validation) from step {}",
        train_w.len(),
        val_w.len(),
        store.global_step()
    );
    let outcome = train(run, store, &train_w, &val_w, |e| {
        if let Some(m) = e.val_minade {
            info!("step {}: joint {:.5} val minADE {:.5}", e.step, e.joint, m);
        }
    })?;
    history.extend(outcome.history.iter().copied());

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_checkpoint(&outcome.last, run, &history, &a.out.join("checkpoint"))?;
    let mut outputs = checkpoint_artifacts(&a.out, "checkpoint")?;
    if !outcome.history.is_empty() {
        let best_history: Vec<MetricPoint> = history.clone();
        save_checkpoint(&outcome.best, run, &best_history, &a.out.join("best"))?;
        outputs.extend(checkpoint_artifacts(&a.out, "best")?);
    }
    let mut log = String::new();
    let log_path = a.out.join("train_log.jsonl");
    if a.resume.is_some() && log_path.exists() {
        log = fs::read_to_string(&log_path)
            .with_context(|| format!("reading {}", log_path.display()))?;
    }
    log.push_str(&log_to_jsonl(&outcome.log)?);
    outputs.push(write_output(&a.out, "train_log.jsonl", log.as_bytes())?);
    RunManifest {
        command: "train".into(),
        config_path: config_path(&a.cfg),
        seed: run.train.seed,
        inputs,
        outputs,
        config: serde_json::to_value(run)?,
    }
    .write(&a.out)
}

/// Checkpoint, data and test-set selection shared by the read-only commands.
#[derive(Args, Debug)]
pub struct ModelInput {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Scene to evaluate on; defaults to the one held out in training, or
    /// every scene.
    #[arg(long = "held-out")]
    pub held_out: Option<String>,
}

struct Loaded<T> {
    run: RunConfig,
    store: rehearsal_core::numerics::ParameterStore<T>,
    test: Vec<SceneWindow>,
    inputs: Vec<Artifact>,
}

impl ModelInput {
    fn precision(&self) -> Result<Precision> {
        Ok(read_checkpoint_manifest(&self.checkpoint)?
            .config
            .train
            .precision)
    }

    fn load<T: Scalar>(&self) -> Result<Loaded<T>> {
        let (store, manifest) = load_checkpoint::<T>(&self.checkpoint)?;
        let run = manifest.config;
        let (scenes, mut inputs) = load_scenes(&self.data, &run)?;
        let held = self.held_out.as_deref().or(run.data.held_out.as_deref());
        let (_, test) = split(&scenes, held)?;
        if test.iter().all(|w| w.ego_indices().is_empty()) {
            warn!("the test set has no ego-eligible agents");
        }
        inputs.extend(input_checkpoint(&self.checkpoint)?);
        Ok(Loaded {
            run,
            store,
            test,
            inputs,
        })
    }
}

macro_rules! by_precision {
    ($input:expr, $f:ident($($arg:expr),*)) => {
        match $input.precision()? {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Number of sampled predictions; the model's K by default.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `metrics.json` and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    by_precision!(a.input, eval_typed(a))
}

fn eval_typed<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let l = a.input.load::<T>()?;
    let k = a.k.unwrap_or(l.run.model.fin.k);
    let report = evaluate(&l.store, &l.run.model, &l.test, k, a.seed)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    print!("{json}");
    if let Some(out) = &a.out {
        let outputs = vec![write_output(out, "metrics.json", json.as_bytes())?];
        RunManifest {
            command: "eval".into(),
            config_path: None,
            seed: a.seed,
            inputs: l.inputs,
            outputs,
            config: serde_json::json!({ "K": k, "model": l.run.model }),
        }
        .write(out)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Activations,
    Insights,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub which: Analysis,
    #[command(flatten)]
    pub input: ModelInput,
    /// Adds the embedded mean trajectory as an extra activation candidate.
    #[arg(long)]
    pub probe: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    by_precision!(a.input, analyze_typed(a))
}

fn analyze_typed<T: Scalar>(a: &AnalyzeArgs) -> Result<()> {
    let l = a.input.load::<T>()?;
    let (name, csv) = match a.which {
        Analysis::Activations => (
            "activations.csv",
            analyze_activations(&l.store, &l.run.model, &l.test, a.probe)?.to_csv()?,
        ),
        Analysis::Insights => (
            "insights.csv",
            insight_summary(&l.store, &l.run.model, &l.test)?.to_csv()?,
        ),
    };
    let outputs = vec![write_output(&a.out, name, csv.as_bytes())?];
    info!(
        "wrote {} rows to {}",
        csv.lines().count().saturating_sub(1),
        a.out.join(name).display()
    );
    RunManifest {
        command: format!("analyze {}", name.trim_end_matches(".csv")),
        config_path: None,
        seed: 0,
        inputs: l.inputs,
        outputs,
        config: serde_json::json!({ "probe": a.probe, "model": l.run.model }),
    }
    .write(&a.out)
}

#[derive(Args, Debug)]
pub struct IntervenArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Index of the window in the test set.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long)]
    pub ego: i64,
    /// Agent whose insight kernel replaces the ego's.
    #[arg(long)]
    pub donor: i64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn intervene(a: &IntervenArgs) -> Result<()> {
    by_precision!(a.input, intervene_typed(a))
}

fn intervene_typed<T: Scalar>(a: &IntervenArgs) -> Result<()> {
    let l = a.input.load::<T>()?;
    let model: &ModelConfig = &l.run.model;
    let win = l.test.get(a.window).ok_or_else(|| {
        Usage(format!(
            "window {} out of range; the test set has {}",
            a.window,
            l.test.len()
        ))
    })?;
    let kernel = kernel_intervention(&l.store, model, win, a.ego, a.donor, a.seed)?;
    let chained = rehearsal_intervention(
        &l.store,
        model,
        win,
        a.ego,
        &kernel.counterfactual_rehearsals::<T>()?,
        a.seed,
    )?;
    println!(
        "kernel: rehearsal delta {:.6}, prediction delta {:.6}",
        kernel.rehearsal_delta, kernel.prediction_delta
    );
    println!(
        "rehearsal: rehearsal delta {:.6}, prediction delta {:.6}",
        chained.rehearsal_delta, chained.prediction_delta
    );
    let outputs = vec![
        write_output(&a.out, "kernel.json", kernel.to_json()?.as_bytes())?,
        write_output(&a.out, "rehearsal.json", chained.to_json()?.as_bytes())?,
    ];
    RunManifest {
        command: "intervene".into(),
        config_path: None,
        seed: a.seed,
        inputs: l.inputs,
        outputs,
        config: serde_json::json!({
            "window": a.window,
            "ego": a.ego,
            "donor": a.donor,
            "model": l.run.model,
        }),
    }
    .write(&a.out)
}
