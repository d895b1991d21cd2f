use num_rational::Ratio;
use serde::Serialize;

use crate::conditioning::{
    biased_observations_for, embed_and_pool, embed_modes, ConditioningBundle, RehearsalSource,
};
use crate::data::SceneWindow;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Graph, IndexTensor, ParameterStore, Tensor};
use crate::scalar::Scalar;

/// Fraction of the `N_r` pooled units won by each candidate mode, exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationRates {
    pub counts: Vec<u64>,
    pub n_r: u64,
}

impl ActivationRates {
    /// Counts the argmax indices; `modes` fixes the number of candidates.
    pub fn from_indices(indices: &IndexTensor, modes: usize) -> Result<Self> {
        let mut counts = vec![0u64; modes];
        for &k in &indices.data {
            *counts
                .get_mut(k)
                .ok_or_else(|| Error::dim(format!("argmax index {k} outside {modes} modes")))? += 1;
        }
        Ok(Self {
            counts,
            n_r: indices.data.len() as u64,
        })
    }

    pub fn rates(&self) -> Vec<Ratio<u64>> {
        self.counts
            .iter()
            .map(|&c| Ratio::new(c, self.n_r))
            .collect()
    }

    pub fn rates_f64(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.n_r as f64)
            .collect()
    }

    /// Exact sum of the rates.
    pub fn total(&self) -> Ratio<u64> {
        self.rates()
            .into_iter()
            .fold(Ratio::from_integer(0), |a, r| a + r)
    }
}

/// Rates of a bundle's own modes.
pub fn activation_rates<T: Scalar>(bundle: &ConditioningBundle<T>) -> Result<ActivationRates> {
    ActivationRates::from_indices(&bundle.argmax_indices, bundle.raw_features.shape()[0])
}

/// Adds the embedded mean trajectory as candidate `K_I` and recounts the
/// argmax over all `K_I + 1` candidates (ties to the smaller index).
pub fn mean_rehearsal_probe<T: Scalar>(
    store: &ParameterStore<T>,
    bundle: &ConditioningBundle<T>,
) -> Result<ActivationRates> {
    let mut g = Graph::with_params(store);
    let l = bundle.mean_trajectory.shape()[0];
    let mean = g.constant(bundle.mean_trajectory.reshape(&[1, l, 2])?);
    let extra = embed_modes(&mut g, mean, bundle.origin)?;
    let candidates = Tensor::concat0(&[bundle.raw_features.clone(), g.value(extra).clone()])?;
    let modes = candidates.shape()[0];
    let c = g.constant(candidates);
    let (_, idx) = g.max_axis0(c)?;
    ActivationRates::from_indices(&idx, modes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationRow {
    pub window: usize,
    pub ego_id: i64,
    pub agent_id: i64,
    pub source: &'static str,
    pub counts: Vec<u64>,
    pub rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationReport {
    /// Number of candidates per row: `K_I`, or `K_I + 1` with the probe.
    pub candidates: usize,
    pub n_r: u64,
    pub rows: Vec<ActivationRow>,
}

impl ActivationReport {
    /// `window,ego_id,agent_id,source,n_r,count_0..,rate_0..`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "window".to_string(),
            "ego_id".into(),
            "agent_id".into(),
            "source".into(),
            "n_r".into(),
        ];
        header.extend((0..self.candidates).map(|k| format!("count_{k}")));
        header.extend((0..self.candidates).map(|k| format!("rate_{k}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.window.to_string(),
                r.ego_id.to_string(),
                r.agent_id.to_string(),
                r.source.to_string(),
                self.n_r.to_string(),
            ];
            rec.extend(r.counts.iter().map(u64::to_string));
            rec.extend(r.rates.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Activation rates of every `(j←i)` bundle of every ego in `windows`.
pub fn analyze_activations<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    windows: &[SceneWindow],
    probe: bool,
) -> Result<ActivationReport> {
    let pred = cfg.ego_predictor()?;
    let candidates = cfg.ego.k_i + usize::from(probe);
    let n_r = (cfg.fin.d_model * cfg.horizon.conditioned_len()) as u64;
    let mut rows = Vec::new();
    for (w, win) in windows.iter().enumerate() {
        for i in win.ego_indices() {
            let obs = biased_observations_for(store, &pred, win, i)?;
            for e in &obs.entries {
                let bundle = embed_and_pool(store, &e.full, win.current(i))?;
                let r = if probe {
                    mean_rehearsal_probe(store, &bundle)?
                } else {
                    activation_rates(&bundle)?
                };
                rows.push(ActivationRow {
                    window: w,
                    ego_id: win.agent_ids[i],
                    agent_id: e.agent_id,
                    source: match e.source {
                        RehearsalSource::EgoPredictor => "ego",
                        RehearsalSource::Linear => "linear",
                    },
                    rates: r.rates_f64(),
                    counts: r.counts,
                });
            }
        }
    }
    Ok(ActivationReport {
        candidates,
        n_r,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::FullRehearsal;

    #[test]
    fn single_mode_rate_is_one() {
        let idx = IndexTensor {
            shape: vec![3, 4],
            data: vec![0; 12],
        };
        let r = ActivationRates::from_indices(&idx, 1).unwrap();
        assert_eq!(r.rates(), vec![Ratio::from_integer(1)]);
    }

    #[test]
    fn hand_built_two_by_two_by_two() {
        // raw[k, m, n]: unit (m,n) maxima at modes 1, 0, 1, 1
        let raw = Tensor::from_f64(&[2, 2, 2], &[0.0, 5.0, -1.0, 0.5, 1.0, 2.0, 3.0, 0.7]).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.constant(raw);
        let (_, idx) = g.max_axis0(v).unwrap();
        let r = ActivationRates::from_indices(&idx, 2).unwrap();
        assert_eq!(r.counts, vec![1, 3]);
        assert_eq!(r.rates(), vec![Ratio::new(1, 4), Ratio::new(3, 4)]);
        assert_eq!(r.total(), Ratio::from_integer(1));
    }

    #[test]
    fn out_of_range_index() {
        let idx = IndexTensor {
            shape: vec![1],
            data: vec![2],
        };
        assert!(ActivationRates::from_indices(&idx, 2).is_err());
    }

    fn setup() -> (ModelConfig, ParameterStore<f64>) {
        let mut c = ModelConfig::full();
        c.ego.d = 8;
        c.fin.d_model = 16;
        let s = c.init_params(3).unwrap();
        (c, s)
    }

    #[test]
    fn identical_modes_probe_goes_to_mode_zero() {
        let (_, s) = setup();
        let mode: Vec<f64> = (0..12).flat_map(|t| [0.4 * t as f64, 0.1]).collect();
        let data: Vec<f64> = (0..3).flat_map(|_| mode.clone()).collect();
        let fr = FullRehearsal {
            trajectories: Tensor::new(&[3, 12, 2], data).unwrap(),
        };
        let b = embed_and_pool(&s, &fr, [2.8, 0.1]).unwrap();
        let r = mean_rehearsal_probe(&s, &b).unwrap();
        assert_eq!(r.counts, vec![12 * 16, 0, 0, 0]);
        assert_eq!(r.total(), Ratio::from_integer(1));
    }

    #[test]
    fn dominated_mean_candidate_leaves_rates() {
        let (_, s) = setup();
        let mut b = embed_and_pool(
            &s,
            &FullRehearsal {
                trajectories: Tensor::new(
                    &[2, 12, 2],
                    (0..48).map(|v| (v as f64 * 0.3).sin()).collect(),
                )
                .unwrap(),
            },
            [0.0, 0.0],
        )
        .unwrap();
        // lift the real modes far above whatever the mean embeds to
        b.raw_features = b.raw_features.map(|v| v + 1e6);
        let plain = activation_rates(&b).unwrap();
        let probed = mean_rehearsal_probe(&s, &b).unwrap();
        assert_eq!(probed.counts[2], 0);
        assert_eq!(&probed.counts[..2], &plain.counts[..]);
    }

    #[test]
    fn corpus_rows_are_partitions() {
        let (c, s) = setup();
        let positions: Vec<Vec<[f64; 2]>> = (0..3)
            .map(|a| {
                (0..20)
                    .map(|t| [a as f64 + 0.4 * t as f64, (0.5 * t as f64 + a as f64).cos()])
                    .collect()
            })
            .collect();
        let w = SceneWindow::new(vec![1, 2, 3], 8, 12, 0.4, positions).unwrap();
        for probe in [false, true] {
            let rep = analyze_activations(&s, &c, std::slice::from_ref(&w), probe).unwrap();
            assert_eq!(rep.rows.len(), 9);
            assert_eq!(rep.n_r, 12 * 16);
            for r in &rep.rows {
                assert_eq!(r.counts.iter().sum::<u64>(), rep.n_r);
            }
            let csv = rep.to_csv().unwrap();
            assert_eq!(csv.lines().count(), 10);
        }
    }
}
