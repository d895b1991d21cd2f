//! Counterfactual interventions on insight kernels and on rehearsals.
//!
//! Both arms of an intervention are computed by the same code path with the
//! same seeds, so substituting a quantity with itself gives deltas of exactly
//! zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conditioning::{condition_var, full_rehearsal_var};
use crate::data::SceneWindow;
use crate::ego::{linear_rehearsal, partition_neighbors, BiasMode, EgoPass, Phase};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Graph, ParameterStore, Tensor};
use crate::scalar::Scalar;

pub const INTERVENTION_FORMAT: &str = "rehearsal-intervention";
pub const INTERVENTION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Kernel,
    Rehearsal,
}

/// `K × T` points.
pub type Modes = Vec<Vec<[f64; 2]>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionEntry {
    pub agent_id: i64,
    /// `"ego"` or `"linear"`.
    pub source: String,
    pub original: Modes,
    pub counterfactual: Modes,
    pub max_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub format: String,
    pub version: u32,
    pub kind: InterventionKind,
    pub ego_id: i64,
    pub donor_id: Option<i64>,
    pub seed: u64,
    /// Rehearsals of every window agent directed by the ego.
    pub entries: Vec<InterventionEntry>,
    pub prediction_original: Modes,
    pub prediction_counterfactual: Modes,
    /// Largest point displacement over all rehearsals.
    pub rehearsal_delta: f64,
    /// Largest point displacement over all predicted modes.
    pub prediction_delta: f64,
}

impl InterventionResult {
    /// Counterfactual rehearsals keyed by agent id, for chaining into
    /// [`rehearsal_intervention`].
    pub fn counterfactual_rehearsals<T: Scalar>(&self) -> Result<BTreeMap<i64, Tensor<T>>> {
        self.entries
            .iter()
            .map(|e| Ok((e.agent_id, modes_tensor(&e.counterfactual)?)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn to_modes<T: Scalar>(t: &Tensor<T>) -> Modes {
    let s = t.shape();
    (0..s[0])
        .map(|k| {
            (0..s[1])
                .map(|p| [t.get(&[k, p, 0]).as_f64(), t.get(&[k, p, 1]).as_f64()])
                .collect()
        })
        .collect()
}

fn modes_tensor<T: Scalar>(m: &Modes) -> Result<Tensor<T>> {
    let t = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != t) {
        return Err(Error::dim("ragged rehearsal modes"));
    }
    let data: Vec<f64> = m.iter().flatten().flatten().copied().collect();
    Tensor::from_f64(&[m.len(), t, 2], &data)
}

fn max_delta<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .chunks_exact(2)
        .zip(b.data().chunks_exact(2))
        .map(|(p, q)| {
            let dx = p[0].as_f64() - q[0].as_f64();
            let dy = p[1].as_f64() - q[1].as_f64();
            (dx * dx + dy * dy).sqrt()
        })
        .fold(0.0, f64::max)
}

fn agent(window: &SceneWindow, id: i64, role: &str) -> Result<usize> {
    window
        .index_of(id)
        .ok_or_else(|| Error::config(format!("{role} {id} is not in the window")))
}

/// Final prediction of ego `i` conditioned on an explicit `(i←i)` rehearsal.
fn predict_with<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    i: usize,
    rehearsal: &Tensor<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut g = Graph::with_params(store);
    let r = g.constant(rehearsal.clone());
    let full = full_rehearsal_var(&mut g, window.observed(i), r)?;
    let bundle = condition_var(&mut g, full, window.current(i))?;
    let (p, _) = cfg
        .final_predictor()?
        .forward_var(&mut g, &bundle, cfg.fin.k, seed)?;
    let out = g.value(p).clone();
    if !out.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite prediction for agent {}",
            window.agent_ids[i]
        )));
    }
    Ok(out)
}

struct Arms<T> {
    sources: Vec<&'static str>,
    original: Vec<Tensor<T>>,
    counterfactual: Vec<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
fn assemble<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    i: usize,
    kind: InterventionKind,
    donor_id: Option<i64>,
    seed: u64,
    arms: Arms<T>,
) -> Result<InterventionResult> {
    let p0 = predict_with(store, cfg, window, i, &arms.original[i], seed)?;
    let p1 = predict_with(store, cfg, window, i, &arms.counterfactual[i], seed)?;
    let entries: Vec<InterventionEntry> = (0..window.num_agents())
        .map(|j| InterventionEntry {
            agent_id: window.agent_ids[j],
            source: arms.sources[j].to_string(),
            original: to_modes(&arms.original[j]),
            counterfactual: to_modes(&arms.counterfactual[j]),
            max_delta: max_delta(&arms.original[j], &arms.counterfactual[j]),
        })
        .collect();
    Ok(InterventionResult {
        format: INTERVENTION_FORMAT.into(),
        version: INTERVENTION_VERSION,
        kind,
        ego_id: window.agent_ids[i],
        donor_id,
        seed,
        rehearsal_delta: entries.iter().map(|e| e.max_delta).fold(0.0, f64::max),
        entries,
        prediction_delta: max_delta(&p0, &p1),
        prediction_original: to_modes(&p0),
        prediction_counterfactual: to_modes(&p1),
    })
}

/// `do(I^i = I^m)`: every rehearsal that ego `i`'s insight kernel directs is
/// recomputed with the donor's kernel instead.
pub fn kernel_intervention<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    ego_id: i64,
    donor_id: i64,
    seed: u64,
) -> Result<InterventionResult> {
    let pred = cfg.ego_predictor()?;
    let i = agent(window, ego_id, "ego")?;
    let m = agent(window, donor_id, "donor")?;
    let partition = partition_neighbors(window, i, cfg.ego.n_ego_neighbors);
    let mut g = Graph::with_params(store);
    let mut pass = EgoPass::new(pred, window, Phase::Inference)?;
    let donor = pass.insight(&mut g, m)?;
    let mut arms = Arms {
        sources: Vec::new(),
        original: Vec::new(),
        counterfactual: Vec::new(),
    };
    for j in 0..window.num_agents() {
        if partition.ego_predicted.contains(&j) {
            let orig = pass.rehearse(&mut g, i, j)?;
            let directed = cfg.ego.bias == BiasMode::Biased || j == i;
            let cf = if directed {
                pass.rehearse_with(&mut g, donor, i, j)?
            } else {
                orig
            };
            arms.sources.push("ego");
            arms.original.push(g.value(orig).clone());
            arms.counterfactual.push(g.value(cf).clone());
        } else {
            let lin = linear_rehearsal::<T>(&pred, window, j, Phase::Inference)?.trajectories;
            arms.sources.push("linear");
            arms.counterfactual.push(lin.clone());
            arms.original.push(lin);
        }
    }
    assemble(
        store,
        cfg,
        window,
        i,
        InterventionKind::Kernel,
        Some(donor_id),
        seed,
        arms,
    )
}

/// `do(Y^{j←i} = Ȳ^j)` for every agent id in `counterfactuals`; the final
/// predictor reruns with the same seed.
pub fn rehearsal_intervention<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    ego_id: i64,
    counterfactuals: &BTreeMap<i64, Tensor<T>>,
    seed: u64,
) -> Result<InterventionResult> {
    let pred = cfg.ego_predictor()?;
    let i = agent(window, ego_id, "ego")?;
    let want = [cfg.ego.k_i, cfg.horizon.t_b, 2];
    let mut subs = vec![None; window.num_agents()];
    for (&id, t) in counterfactuals {
        let j = agent(window, id, "agent")?;
        if t.shape() != want {
            return Err(Error::dim(format!(
                "counterfactual rehearsals of agent {id} have shape {:?}, expected {want:?}",
                t.shape()
            )));
        }
        subs[j] = Some(t);
    }
    let partition = partition_neighbors(window, i, cfg.ego.n_ego_neighbors);
    let mut g = Graph::with_params(store);
    let mut pass = EgoPass::new(pred, window, Phase::Inference)?;
    let mut arms = Arms {
        sources: Vec::new(),
        original: Vec::new(),
        counterfactual: Vec::new(),
    };
    for (j, sub) in subs.into_iter().enumerate() {
        let (source, orig) = if partition.ego_predicted.contains(&j) {
            let r = pass.rehearse(&mut g, i, j)?;
            ("ego", g.value(r).clone())
        } else {
            (
                "linear",
                linear_rehearsal::<T>(&pred, window, j, Phase::Inference)?.trajectories,
            )
        };
        arms.sources.push(source);
        arms.counterfactual
            .push(sub.cloned().unwrap_or_else(|| orig.clone()));
        arms.original.push(orig);
    }
    assemble(
        store,
        cfg,
        window,
        i,
        InterventionKind::Rehearsal,
        None,
        seed,
        arms,
    )
}
