//! Full rehearsals, biased observations, and the pooled and mean conditions
//! read by the final predictor.

use rand::Rng;

use crate::data::{Point, SceneWindow};
use crate::ego::{
    linear_rehearsal, partition_neighbors, EgoPass, EgoPredictor, NeighborPartition, Phase,
    RehearsalSet,
};
use crate::error::{Error, Result};
use crate::numerics::nn::register_mlp;
use crate::numerics::{mlp_forward, Activation, Graph, IndexTensor, ParameterStore, Tensor, Var};
use crate::scalar::Scalar;

/// `K_I × (t_h+t_b) × 2`: the observation followed by each rehearsal mode.
#[derive(Clone, Debug, PartialEq)]
pub struct FullRehearsal<T> {
    pub trajectories: Tensor<T>,
}

fn observation<T: Scalar>(x_h: &[Point]) -> Result<Tensor<T>> {
    Ok(Tensor::from_points(x_h)?.cast())
}

/// Prepends `x_h` to every inference-phase rehearsal mode.
pub fn concat_full_rehearsal<T: Scalar>(
    x_h: &[Point],
    rehearsals: &RehearsalSet<T>,
) -> Result<FullRehearsal<T>> {
    if rehearsals.phase != Phase::Inference {
        return Err(Error::Contract(
            "training-phase rehearsals cannot condition the final predictor".into(),
        ));
    }
    let obs = observation::<T>(x_h)?;
    let modes = (0..rehearsals.modes())
        .map(|k| Tensor::concat0(&[obs.clone(), rehearsals.trajectories.index0(k)?]))
        .collect::<Result<Vec<_>>>()?;
    Ok(FullRehearsal {
        trajectories: Tensor::stack(&modes)?,
    })
}

/// Graph counterpart of [`concat_full_rehearsal`] for a rehearsal node.
pub fn full_rehearsal_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    x_h: &[Point],
    rehearsals: Var,
) -> Result<Var> {
    let obs = g.constant(observation(x_h)?);
    let k = g.shape(rehearsals)[0];
    let mut modes = Vec::with_capacity(k);
    for m in 0..k {
        let r = g.index0(rehearsals, m)?;
        modes.push(g.concat0(&[obs, r])?);
    }
    g.stack(&modes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RehearsalSource {
    EgoPredictor,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasedEntry<T> {
    pub agent: usize,
    pub agent_id: i64,
    pub source: RehearsalSource,
    pub full: FullRehearsal<T>,
}

/// One full rehearsal per window agent, all directed by the same ego.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasedObservations<T> {
    pub ego: usize,
    pub entries: Vec<BiasedEntry<T>>,
}

impl<T> BiasedObservations<T> {
    pub fn entry(&self, agent: usize) -> Option<&BiasedEntry<T>> {
        self.entries.iter().find(|e| e.agent == agent)
    }
}

/// Inference-phase rehearsals of every agent for ego `i`, in window order.
pub fn build_biased_observations<T: Scalar>(
    store: &ParameterStore<T>,
    pred: &EgoPredictor,
    window: &SceneWindow,
    i: usize,
    partition: &NeighborPartition,
) -> Result<BiasedObservations<T>> {
    let mut g = Graph::with_params(store);
    let mut pass = EgoPass::new(*pred, window, Phase::Inference)?;
    let mut entries = Vec::with_capacity(window.num_agents());
    for j in 0..window.num_agents() {
        let (set, source) = if partition.ego_predicted.contains(&j) {
            let r = pass.rehearse(&mut g, i, j)?;
            (
                RehearsalSet::new(g.value(r).clone(), Phase::Inference)?,
                RehearsalSource::EgoPredictor,
            )
        } else {
            (
                linear_rehearsal(pred, window, j, Phase::Inference)?,
                RehearsalSource::Linear,
            )
        };
        entries.push(BiasedEntry {
            agent: j,
            agent_id: window.agent_ids[j],
            source,
            full: concat_full_rehearsal(window.observed(j), &set)?,
        });
    }
    Ok(BiasedObservations { ego: i, entries })
}

/// Shorthand for [`build_biased_observations`] with the configured partition.
pub fn biased_observations_for<T: Scalar>(
    store: &ParameterStore<T>,
    pred: &EgoPredictor,
    window: &SceneWindow,
    i: usize,
) -> Result<BiasedObservations<T>> {
    let partition = partition_neighbors(window, i, pred.cfg.n_ego_neighbors);
    build_biased_observations(store, pred, window, i, &partition)
}

/// Registers the `2 → d′ → d′` trajectory embedding `fin.embed`.
pub fn register_embedding<T: Scalar>(
    store: &mut ParameterStore<T>,
    d_fin: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    register_mlp(store, "fin.embed", &[2, d_fin, d_fin], rng)
}

fn centered<T: Scalar>(g: &mut Graph<'_, T>, traj: Var, origin: Point) -> Result<Var> {
    let shape = g.shape(traj).to_vec();
    let n = shape.iter().product::<usize>() / 2;
    let data: Vec<f64> = (0..n).flat_map(|_| origin).collect();
    let o = g.constant(Tensor::from_f64(&shape, &data)?);
    g.sub(traj, o)
}

/// Embeds every mode of a full rehearsal (moved so that `origin` is zero):
/// `K × L × 2 → K × L × d′`.
pub fn embed_modes<T: Scalar>(g: &mut Graph<'_, T>, full: Var, origin: Point) -> Result<Var> {
    let x = centered(g, full, origin)?;
    mlp_forward(g, "fin.embed", x, 2, Activation::None)
}

/// Graph nodes of one conditioning bundle.
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub raw: Var,
    pub pooled: Var,
    pub argmax: IndexTensor,
    pub mean: Var,
    pub origin: Point,
}

/// Mode-wise max-pool of the embedded modes and the mode mean of the
/// trajectories. Pooling ties go to the smallest mode index.
pub fn condition_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    full: Var,
    origin: Point,
) -> Result<BundleVars> {
    let raw = embed_modes(g, full, origin)?;
    let (pooled, argmax) = g.max_axis0(raw)?;
    let mean = g.mean_axis0(full)?;
    Ok(BundleVars {
        raw,
        pooled,
        argmax,
        mean,
        origin,
    })
}

/// Feature-level and trajectory-level conditions of one `(j←i)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    /// `(t_h+t_b) × d′`
    pub pooled_feature: Tensor<T>,
    /// `(t_h+t_b) × d′`, entries in `0..K_I`
    pub argmax_indices: IndexTensor,
    /// `(t_h+t_b) × 2`, scene coordinates
    pub mean_trajectory: Tensor<T>,
    /// `K_I × (t_h+t_b) × d′`
    pub raw_features: Tensor<T>,
    /// Ego position at the current step; the embedding sees trajectories
    /// relative to it.
    pub origin: Point,
}

impl<T: Scalar> ConditioningBundle<T> {
    pub fn from_vars(g: &Graph<'_, T>, v: &BundleVars) -> Self {
        Self {
            pooled_feature: g.value(v.pooled).clone(),
            argmax_indices: v.argmax.clone(),
            mean_trajectory: g.value(v.mean).clone(),
            raw_features: g.value(v.raw).clone(),
            origin: v.origin,
        }
    }
}

/// Value-level bundle of a full rehearsal.
pub fn embed_and_pool<T: Scalar>(
    store: &ParameterStore<T>,
    full: &FullRehearsal<T>,
    origin: Point,
) -> Result<ConditioningBundle<T>> {
    let mut g = Graph::with_params(store);
    let f = g.constant(full.trajectories.clone());
    let v = condition_var(&mut g, f, origin)?;
    Ok(ConditioningBundle::from_vars(&g, &v))
}

/// Per-step mean over modes.
pub fn mean_trajectory<T: Scalar>(full: &FullRehearsal<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(full.trajectories.clone());
    let m = g.mean_axis0(f)?;
    Ok(g.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HorizonConfig;
    use crate::ego::EgoConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn predictor() -> EgoPredictor {
        EgoPredictor::new(
            HorizonConfig::PEDESTRIAN,
            EgoConfig {
                d: 8,
                ..EgoConfig::default()
            },
        )
        .unwrap()
    }

    fn store(p: &EgoPredictor, d_fin: usize) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        p.register(&mut s, &mut rng).unwrap();
        register_embedding(&mut s, d_fin, &mut rng).unwrap();
        s
    }

    fn window(n: usize) -> SceneWindow {
        let positions = (0..n)
            .map(|a| {
                (0..20)
                    .map(|t| {
                        let t = t as f64;
                        [a as f64 * 1.5 + 0.4 * t, (0.3 * t + a as f64).sin()]
                    })
                    .collect()
            })
            .collect();
        SceneWindow::new((1..=n as i64).collect(), 8, 12, 0.4, positions).unwrap()
    }

    fn rehearsal(k: usize, phase: Phase) -> RehearsalSet<f64> {
        let data: Vec<f64> = (0..k * 4 * 2).map(|v| v as f64 * 0.1).collect();
        RehearsalSet::new(Tensor::new(&[k, 4, 2], data).unwrap(), phase).unwrap()
    }

    #[test]
    fn full_rehearsal_shape_and_prefix() {
        let w = window(1);
        let fr = concat_full_rehearsal(w.observed(0), &rehearsal(3, Phase::Inference)).unwrap();
        assert_eq!(fr.trajectories.shape(), [3, 12, 2]);
        for k in 0..3 {
            for t in 0..8 {
                for c in 0..2 {
                    assert_eq!(fr.trajectories.get(&[k, t, c]), w.positions[0][t][c]);
                }
            }
        }
    }

    #[test]
    fn training_phase_rejected() {
        let w = window(1);
        assert!(matches!(
            concat_full_rehearsal(w.observed(0), &rehearsal(3, Phase::Training)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn biased_observation_counts() {
        let p = predictor();
        let s = store(&p, 16);
        let one = window(1);
        let bo = biased_observations_for(&s, &p, &one, 0).unwrap();
        assert_eq!(bo.entries.len(), 1);
        let seven = window(7);
        let bo = biased_observations_for(&s, &p, &seven, 3).unwrap();
        assert_eq!(bo.entries.len(), 7);
        let ego = bo
            .entries
            .iter()
            .filter(|e| e.source == RehearsalSource::EgoPredictor)
            .count();
        assert_eq!(ego, 6);
    }

    #[test]
    fn pooled_gathers_raw() {
        let p = predictor();
        let s = store(&p, 16);
        let w = window(3);
        let bo = biased_observations_for(&s, &p, &w, 1).unwrap();
        let b = embed_and_pool(&s, &bo.entries[0].full, w.current(1)).unwrap();
        assert_eq!(b.pooled_feature.shape(), [12, 16]);
        for m in 0..12 {
            for n in 0..16 {
                let k = b.argmax_indices.data[m * 16 + n];
                assert!(k < 3);
                assert_eq!(
                    b.pooled_feature.get(&[m, n]),
                    b.raw_features.get(&[k, m, n])
                );
                for kk in 0..3 {
                    assert!(b.pooled_feature.get(&[m, n]) >= b.raw_features.get(&[kk, m, n]));
                }
            }
        }
        for t in 0..8 {
            assert_eq!(b.mean_trajectory.get(&[t, 0]), w.positions[0][t][0]);
            assert_eq!(b.mean_trajectory.get(&[t, 1]), w.positions[0][t][1]);
        }
    }

    #[test]
    fn identical_modes_pool_to_zero_index() {
        let p = predictor();
        let s = store(&p, 16);
        let w = window(1);
        let lin: RehearsalSet<f64> = linear_rehearsal(&p, &w, 0, Phase::Inference).unwrap();
        let fr = concat_full_rehearsal(w.observed(0), &lin).unwrap();
        let b = embed_and_pool(&s, &fr, w.current(0)).unwrap();
        assert!(b.argmax_indices.data.iter().all(|&k| k == 0));
        assert_eq!(b.mean_trajectory, fr.trajectories.index0(1).unwrap());
    }

    #[test]
    fn single_mode_pool() {
        let p = EgoPredictor::new(
            HorizonConfig::PEDESTRIAN,
            EgoConfig {
                d: 8,
                k_i: 1,
                ..EgoConfig::default()
            },
        )
        .unwrap();
        let s = store(&p, 16);
        let w = window(2);
        let bo = biased_observations_for(&s, &p, &w, 0).unwrap();
        let b = embed_and_pool(&s, &bo.entries[1].full, w.current(0)).unwrap();
        assert!(b.argmax_indices.data.iter().all(|&k| k == 0));
        assert_eq!(b.pooled_feature, b.raw_features.index0(0).unwrap());
    }

    #[test]
    fn mean_of_two_modes_is_midpoint() {
        let fr: FullRehearsal<f64> = FullRehearsal {
            trajectories: Tensor::from_f64(&[2, 1, 2], &[0.0, 0.0, 2.0, 2.0]).unwrap(),
        };
        assert_eq!(mean_trajectory(&fr).unwrap().data(), [1.0, 1.0]);
    }

    #[test]
    fn dominated_extra_mode_leaves_pool_unchanged() {
        let mut g = Graph::<f64>::new();
        let raw = Tensor::from_f64(&[2, 1, 3], &[1.0, -2.0, 0.5, 0.0, 3.0, 0.5]).unwrap();
        let extra = Tensor::from_f64(&[1, 1, 3], &[0.0, -5.0, 0.5]).unwrap();
        let a = g.constant(raw.clone());
        let (pa, ia) = g.max_axis0(a).unwrap();
        let b = g.constant(Tensor::concat0(&[raw, extra]).unwrap());
        let (pb, ib) = g.max_axis0(b).unwrap();
        assert_eq!(g.value(pa), g.value(pb));
        assert_eq!(ia, ib);
    }
}
