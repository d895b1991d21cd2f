//! Joint optimization of both predictors.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SceneWindow;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::final_predictor::mix_seed;
use crate::model::{sample_loss, ModelConfig};
use crate::numerics::optim::clip_grad_norm;
use crate::numerics::{adam_step, AdamConfig, Grads, Graph, ParameterStore};
use crate::scalar::Scalar;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, ParamRecord, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Learning rate as a function of the global step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at step 0 down to `min_lr` at the last step.
    Cosine { min_lr: f64 },
}

impl LrSchedule {
    /// Rate for the update that follows `step` completed steps of `total`.
    pub fn at(self, lr: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine { min_lr } => {
                let frac = if total <= 1 {
                    0.0
                } else {
                    step as f64 / (total - 1) as f64
                };
                min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Number of `(window, ego)` samples per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub precision: Precision,
    /// Validation every this many steps, and after the last step.
    pub eval_every: u64,
    /// Modes used for validation; the model's `K` when unset.
    pub eval_k: Option<usize>,
    pub clip_norm: Option<f64>,
    /// Worker threads for per-sample losses; rayon's default when unset.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            schedule: LrSchedule::Constant,
            batch: 500,
            epochs: 300,
            max_steps: None,
            seed: 0,
            precision: Precision::F32,
            eval_every: 100,
            eval_k: None,
            clip_norm: None,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "need lr > 0, batch ≥ 1, epochs ≥ 1 and eval_every ≥ 1",
            ));
        }
        if let LrSchedule::Cosine { min_lr } = self.schedule {
            if !(min_lr >= 0.0 && min_lr <= self.lr) {
                return Err(Error::config(format!(
                    "cosine floor must lie in [0, lr], got {min_lr}"
                )));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Windowing of raw trajectory files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub stride: usize,
    pub dt: f64,
    pub held_out: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            dt: 0.4,
            held_out: None,
        }
    }
}

/// Everything a run needs besides the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Desk profile: `d = 16`, `d′ = 32`, batches of 32 samples.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig {
                batch: 32,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Batch means of the joint, final and ego losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub joint: f64,
    #[serde(rename = "final")]
    pub fin: f64,
    pub ego: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub val_minade: f64,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub joint: f64,
    #[serde(rename = "final")]
    pub fin: f64,
    pub ego: f64,
    pub val_minade: Option<f64>,
}

/// One JSON object per line, in step order.
pub fn log_to_jsonl(log: &[LogEntry]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Every `(window, ego)` pair of the corpus, in corpus order.
pub fn enumerate_samples(windows: &[SceneWindow]) -> Vec<(usize, usize)> {
    windows
        .iter()
        .enumerate()
        .flat_map(|(w, win)| win.ego_indices().into_iter().map(move |i| (w, i)))
        .collect()
}

struct SampleResult<T> {
    grads: Grads<T>,
    joint: f64,
    fin: f64,
    ego: f64,
}

fn sample_grads<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    i: usize,
    seed: u64,
) -> Result<SampleResult<T>> {
    let mut g = Graph::with_params(store);
    let l = sample_loss(&mut g, cfg, window, i, seed)?;
    let joint = g.value(l.joint).item().as_f64();
    if !joint.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss for agent {} of the window starting at frame {}",
            window.agent_ids[i], window.start_frame
        )));
    }
    let ego = if l.ego.is_empty() {
        0.0
    } else {
        l.ego
            .iter()
            .map(|&v| g.value(v).item().as_f64())
            .sum::<f64>()
            / l.ego.len() as f64
    };
    let grads = g.param_grads(&g.backward(l.joint)?);
    Ok(SampleResult {
        grads,
        joint,
        fin: g.value(l.fin).item().as_f64(),
        ego,
    })
}

/// One Adam step on the mean joint loss of `batch`. Per-sample gradients may
/// be computed in parallel; they are summed in batch order.
pub fn train_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    cfg: &ModelConfig,
    batch: &[(&SceneWindow, usize)],
    adam: &AdamConfig,
    clip_norm: Option<f64>,
    seed: u64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    for (w, i) in batch {
        if w.future(*i).is_none() {
            return Err(Error::Data(format!(
                "agent {} of the window starting at frame {} has no complete future",
                w.agent_ids[*i], w.start_frame
            )));
        }
    }
    let shared = &*store;
    let results: Vec<Result<SampleResult<T>>> = batch
        .par_iter()
        .enumerate()
        .map(|(pos, (w, i))| sample_grads(shared, cfg, w, *i, mix_seed(seed, pos as u64)))
        .collect();
    let mut total = store.zero_grads();
    let (mut joint, mut fin, mut ego) = (0.0, 0.0, 0.0);
    for r in results {
        let r = r?;
        for (name, g) in r.grads {
            let acc = total
                .get_mut(&name)
                .expect("gradients keyed like the store");
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        joint += r.joint;
        fin += r.fin;
        ego += r.ego;
    }
    let n = batch.len() as f64;
    let inv = T::lit(1.0 / n);
    for g in total.values_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    if let Some(c) = clip_norm {
        clip_grad_norm(&mut total, c);
    }
    adam_step(store, &total, adam)?;
    Ok(LossReport {
        joint: joint / n,
        fin: fin / n,
        ego: ego / n,
    })
}

/// Mean losses over every `(window, ego)` sample, without updating anything.
/// Sample `p` uses the final-predictor seed `mix_seed(seed, p)`.
pub fn corpus_losses<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    windows: &[SceneWindow],
    seed: u64,
) -> Result<LossReport> {
    let samples = enumerate_samples(windows);
    if samples.is_empty() {
        return Err(Error::config("the corpus has no ego-eligible agents"));
    }
    let per: Vec<Result<[f64; 3]>> = samples
        .par_iter()
        .enumerate()
        .map(|(pos, &(w, i))| {
            let mut g = Graph::with_params(store);
            let l = sample_loss(&mut g, cfg, &windows[w], i, mix_seed(seed, pos as u64))?;
            let ego = if l.ego.is_empty() {
                0.0
            } else {
                l.ego
                    .iter()
                    .map(|&v| g.value(v).item().as_f64())
                    .sum::<f64>()
                    / l.ego.len() as f64
            };
            Ok([
                g.value(l.joint).item().as_f64(),
                g.value(l.fin).item().as_f64(),
                ego,
            ])
        })
        .collect();
    let mut sum = [0.0; 3];
    for r in per {
        for (s, v) in sum.iter_mut().zip(r?) {
            *s += v;
        }
    }
    let n = samples.len() as f64;
    Ok(LossReport {
        joint: sum[0] / n,
        fin: sum[1] / n,
        ego: sum[2] / n,
    })
}

pub struct TrainOutcome<T> {
    /// Parameters with the lowest validation minADE (the last ones without
    /// validation data).
    pub best: ParameterStore<T>,
    pub last: ParameterStore<T>,
    pub log: Vec<LogEntry>,
    pub history: Vec<MetricPoint>,
}

fn run_in_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Seeded epoch loop from `store` (fresh or resumed). Calls `on_log` after
/// every step.
pub fn train<T: Scalar>(
    run: &RunConfig,
    store: ParameterStore<T>,
    train_windows: &[SceneWindow],
    val_windows: &[SceneWindow],
    on_log: impl FnMut(&LogEntry) + Send,
) -> Result<TrainOutcome<T>> {
    run.validate()?;
    let samples = enumerate_samples(train_windows);
    if samples.is_empty() {
        return Err(Error::config("the training set has no ego-eligible agents"));
    }
    run_in_pool(run.train.threads, || {
        train_loop(run, store, train_windows, val_windows, &samples, on_log)
    })?
}

fn train_loop<T: Scalar>(
    run: &RunConfig,
    mut store: ParameterStore<T>,
    train_windows: &[SceneWindow],
    val_windows: &[SceneWindow],
    samples: &[(usize, usize)],
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome<T>> {
    let tc = &run.train;
    let per_epoch = samples.len().div_ceil(tc.batch) as u64;
    let total_steps = match tc.max_steps {
        Some(m) => m.min(per_epoch * tc.epochs as u64),
        None => per_epoch * tc.epochs as u64,
    };
    let eval_k = tc.eval_k.unwrap_or(run.model.fin.k);
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, ParameterStore<T>)> = None;
    let mut order = samples.to_vec();
    let mut epoch = u64::MAX;
    while store.global_step() < total_steps {
        let step = store.global_step();
        let e = step / per_epoch;
        if e != epoch {
            epoch = e;
            order = samples.to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, e)));
        }
        let start = ((step % per_epoch) as usize) * tc.batch;
        let end = (start + tc.batch).min(order.len());
        let batch: Vec<(&SceneWindow, usize)> = order[start..end]
            .iter()
            .map(|&(w, i)| (&train_windows[w], i))
            .collect();
        let adam = AdamConfig::with_lr(tc.schedule.at(tc.lr, step, total_steps));
        let report = train_step(
            &mut store,
            &run.model,
            &batch,
            &adam,
            tc.clip_norm,
            mix_seed(tc.seed ^ 0x5eed, step),
        )?;
        let done = store.global_step();
        let val_minade =
            if !val_windows.is_empty() && (done.is_multiple_of(tc.eval_every) || done == total_steps) {
                let m = evaluate(&store, &run.model, val_windows, eval_k, tc.seed)?.minade;
                history.push(MetricPoint {
                    step: done,
                    val_minade: m,
                });
                if best.as_ref().is_none_or(|(b, _)| m < *b) {
                    best = Some((m, store.clone()));
                }
                Some(m)
            } else {
                None
            };
        let entry = LogEntry {
            step: done,
            joint: report.joint,
            fin: report.fin,
            ego: report.ego,
            val_minade,
        };
        on_log(&entry);
        log.push(entry);
    }
    let best = best.map(|(_, s)| s).unwrap_or_else(|| store.clone());
    Ok(TrainOutcome {
        best,
        last: store,
        log,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_windows, synth_generate, SynthConfig};

    fn tiny_run() -> RunConfig {
        let mut r = RunConfig::desk();
        r.model.ego.d = 8;
        r.model.fin.d_model = 16;
        r.model.fin.k = 2;
        r.model.fin.noise_dim = 4;
        r.train.batch = 4;
        r.train.lr = 1e-3;
        r
    }

    fn corpus(n: usize) -> Vec<SceneWindow> {
        let cfg = SynthConfig {
            n_scenes: n,
            n_agents: 3,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 1)
            .unwrap()
            .iter()
            .flat_map(|s| build_windows(&s.records, 8, 12, 1, 0.4).unwrap())
            .collect()
    }

    #[test]
    fn config_json_round_trip() {
        let r = RunConfig::desk();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let partial: RunConfig = serde_json::from_str(r#"{"train": {"lr": 0.01}}"#).unwrap();
        assert_eq!(partial.train.lr, 0.01);
        assert_eq!(partial.model, ModelConfig::full());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LrSchedule::Cosine { min_lr: 1e-4 };
        assert_eq!(c.at(1e-2, 0, 11), 1e-2);
        assert!((c.at(1e-2, 5, 11) - 0.5 * (1e-2 + 1e-4)).abs() < 1e-15);
        assert!((c.at(1e-2, 10, 11) - 1e-4).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.at(3e-3, 7, 11), 3e-3);
        let mut r = tiny_run();
        r.train.schedule = LrSchedule::Cosine { min_lr: 1.0 };
        assert!(r.validate().is_err());
    }

    #[test]
    fn invalid_train_config() {
        let mut r = tiny_run();
        r.train.batch = 0;
        assert!(r.validate().is_err());
        r.train.batch = 1;
        r.train.lr = 0.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn one_epoch_one_batch_is_one_step() {
        let mut r = tiny_run();
        r.train.epochs = 1;
        r.train.batch = 100;
        let ws = corpus(1);
        let store = r.model.init_params::<f32>(0).unwrap();
        let out = train(&r, store, &ws, &[], |_| {}).unwrap();
        assert_eq!(out.last.global_step(), 1);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn empty_training_set_rejected() {
        let r = tiny_run();
        let store = r.model.init_params::<f32>(0).unwrap();
        assert!(matches!(
            train(&r, store, &[], &[], |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_runs_identical_reports() {
        let mut r = tiny_run();
        r.train.max_steps = Some(3);
        let ws = corpus(2);
        let run = || {
            let store = r.model.init_params::<f32>(2).unwrap();
            train(&r, store, &ws, &ws[..1], |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(log_to_jsonl(&a.log).unwrap(), log_to_jsonl(&b.log).unwrap());
        assert_eq!(log_to_jsonl(&a.log).unwrap().lines().count(), 3);
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
        assert_eq!(a.history.len(), 1);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut r = tiny_run();
        r.train.max_steps = Some(2);
        let ws = corpus(2);
        let mut one = r.clone();
        one.train.threads = Some(1);
        let mut three = r.clone();
        three.train.threads = Some(3);
        let a = train(
            &one,
            r.model.init_params::<f32>(3).unwrap(),
            &ws,
            &[],
            |_| {},
        )
        .unwrap();
        let b = train(
            &three,
            r.model.init_params::<f32>(3).unwrap(),
            &ws,
            &[],
            |_| {},
        )
        .unwrap();
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn resume_continues_step_count() {
        let mut r = tiny_run();
        r.train.max_steps = Some(2);
        let ws = corpus(2);
        let first = train(&r, r.model.init_params::<f32>(4).unwrap(), &ws, &[], |_| {}).unwrap();
        r.train.max_steps = Some(4);
        let second = train(&r, first.last, &ws, &[], |_| {}).unwrap();
        let steps: Vec<u64> = second.log.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![3, 4]);
    }

    #[test]
    fn malformed_sample_rejected_at_assembly() {
        let r = tiny_run();
        let mut ws = corpus(1);
        let mut store = r.model.init_params::<f32>(0).unwrap();
        ws[0].positions[0].truncate(8);
        let batch = vec![(&ws[0], 0)];
        let err = train_step(
            &mut store,
            &r.model,
            &batch,
            &AdamConfig::default(),
            None,
            0,
        );
        assert!(matches!(err, Err(Error::Data(_))));
        assert_eq!(store.global_step(), 0);
    }

    #[test]
    fn constant_velocity_corpus_is_learned() {
        // deterministic targets: no noise input, and a decaying rate so Adam
        // settles instead of circling the optimum of the unsquared distance
        let mut r = tiny_run();
        r.model.fin.noise_dim = 0;
        r.train.lr = 1e-2;
        r.train.schedule = LrSchedule::Cosine { min_lr: 0.0 };
        r.train.batch = 8;
        let cfg = SynthConfig {
            n_scenes: 1,
            n_agents: 2,
            turn_probability: 0.0,
            speed_min: 0.5,
            speed_max: 0.5,
            ..SynthConfig::default()
        };
        let scene = &synth_generate(&cfg, 9).unwrap()[0];
        let w = build_windows(&scene.records, 8, 12, 1, 0.4).unwrap();
        let ws: Vec<SceneWindow> = (0..4).map(|_| w[0].clone()).collect();
        r.train.max_steps = Some(200);
        let out = train(&r, r.model.init_params::<f64>(5).unwrap(), &ws, &[], |_| {}).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.joint < 1e-2, "joint loss {}", last.joint);
    }
}
