//! The joint model: ego predictor, conditioning and final predictor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{condition_var, full_rehearsal_var, BundleVars, ConditioningBundle};
use crate::data::{HorizonConfig, SceneWindow};
use crate::ego::{ego_loss, partition_neighbors, EgoConfig, EgoPass, EgoPredictor, Phase};
use crate::error::{Error, Result};
use crate::final_predictor::{final_loss, FinalConfig, FinalPrediction, FinalPredictor};
use crate::losses::joint_loss;
use crate::numerics::{Graph, ParameterStore, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub horizon: HorizonConfig,
    pub ego: EgoConfig,
    #[serde(rename = "final")]
    pub fin: FinalConfig,
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Pedestrian settings: `d = 64`, `d′ = 128`, `K_I = 3`, `K = 20`, `λ = 0.6`.
    pub fn full() -> Self {
        Self {
            horizon: HorizonConfig::PEDESTRIAN,
            ego: EgoConfig::default(),
            fin: FinalConfig::default(),
            lambda: 0.6,
        }
    }

    /// Laptop-sized widths: `d = 16`, `d′ = 32`.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.ego.d = 16;
        c.fin.d_model = 32;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.horizon.validate()?;
        self.ego.validate(&self.horizon)?;
        self.fin.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "λ must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn ego_predictor(&self) -> Result<EgoPredictor> {
        EgoPredictor::new(self.horizon, self.ego)
    }

    pub fn final_predictor(&self) -> Result<FinalPredictor> {
        FinalPredictor::new(self.horizon, self.fin)
    }

    /// Fresh parameters: Xavier-uniform weights, zero biases, unit gains.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.ego_predictor()?.register(&mut store, &mut rng)?;
        self.final_predictor()?.register(&mut store, &mut rng)?;
        Ok(store)
    }
}

/// Graph nodes of one ego's conditioning: its own full rehearsal and bundle.
pub struct EgoCondition {
    pub full: Var,
    pub bundle: BundleVars,
}

/// Inference-phase rehearsal of the ego by itself, pooled into a bundle.
pub fn ego_condition<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    i: usize,
) -> Result<EgoCondition> {
    let mut pass = EgoPass::new(cfg.ego_predictor()?, window, Phase::Inference)?;
    let r = pass.rehearse(g, i, i)?;
    let full = full_rehearsal_var(g, window.observed(i), r)?;
    let bundle = condition_var(g, full, window.current(i))?;
    Ok(EgoCondition { full, bundle })
}

/// Graph nodes of the losses of one `(window, ego)` sample.
pub struct SampleLoss {
    pub joint: Var,
    pub fin: Var,
    /// One per ego-predicted agent, the ego first.
    pub ego: Vec<Var>,
    pub prediction: Var,
}

/// Joint loss of ego `i`: best-of-K final loss on its future plus `λ` times
/// the mean training-phase ego loss over its ego-predicted pairs.
pub fn sample_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    i: usize,
    seed: u64,
) -> Result<SampleLoss> {
    let truth = window.future(i).ok_or_else(|| {
        Error::Data(format!(
            "agent {} has no complete future",
            window.agent_ids[i]
        ))
    })?;
    let pred = cfg.ego_predictor()?;
    let partition = partition_neighbors(window, i, cfg.ego.n_ego_neighbors);
    let mut pass = EgoPass::new(pred, window, Phase::Training)?;
    let mut ego = Vec::with_capacity(partition.ego_predicted.len());
    for &j in &partition.ego_predicted {
        let r = pass.rehearse(g, i, j)?;
        let target = pass
            .targets(j)
            .expect("training targets lie inside the observation");
        ego.push(ego_loss(g, r, target)?);
    }
    let cond = ego_condition(g, cfg, window, i)?;
    let (prediction, _) = cfg
        .final_predictor()?
        .forward_var(g, &cond.bundle, cfg.fin.k, seed)?;
    let fin = final_loss(g, prediction, truth)?;
    let joint = joint_loss(g, fin, &ego, cfg.lambda)?;
    Ok(SampleLoss {
        joint,
        fin,
        ego,
        prediction,
    })
}

/// `k` predicted futures of ego `i` and the bundle they were read from.
pub fn predict<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    window: &SceneWindow,
    i: usize,
    k: usize,
    seed: u64,
) -> Result<(FinalPrediction<T>, ConditioningBundle<T>)> {
    let mut g = Graph::with_params(store);
    let cond = ego_condition(&mut g, cfg, window, i)?;
    let (p, noise_seeds) = cfg
        .final_predictor()?
        .forward_var(&mut g, &cond.bundle, k, seed)?;
    let pred = FinalPrediction {
        trajectories: g.value(p).clone(),
        noise_seeds,
    };
    if !pred.trajectories.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite prediction for agent {}",
            window.agent_ids[i]
        )));
    }
    Ok((pred, ConditioningBundle::from_vars(&g, &cond.bundle)))
}
