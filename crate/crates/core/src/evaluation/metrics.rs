use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SceneWindow;
use crate::error::{Error, Result};
use crate::final_predictor::mix_seed;
use crate::model::{predict, ModelConfig};
use crate::numerics::{ParameterStore, Tensor};
use crate::scalar::Scalar;

fn check<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(usize, usize)> {
    let ps = pred.shape();
    if ps.len() != 3 || ps[2] != 2 || truth.shape() != [ps[1], 2] {
        return Err(Error::dim(format!(
            "predictions {ps:?} do not match ground truth {:?}",
            truth.shape()
        )));
    }
    Ok((ps[0], ps[1]))
}

fn dist<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, k: usize, t: usize) -> f64 {
    let dx = pred.get(&[k, t, 0]).as_f64() - truth.get(&[t, 0]).as_f64();
    let dy = pred.get(&[k, t, 1]).as_f64() - truth.get(&[t, 1]).as_f64();
    (dx * dx + dy * dy).sqrt()
}

/// `min_k mean_t ‖pred[k,t] − truth[t]‖₂` for `pred: K×T×2`, `truth: T×2`.
pub fn min_ade<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (k, t) = check(pred, truth)?;
    Ok((0..k)
        .map(|m| (0..t).map(|s| dist(pred, truth, m, s)).sum::<f64>() / t as f64)
        .fold(f64::INFINITY, f64::min))
}

/// `min_k ‖pred[k,T−1] − truth[T−1]‖₂`.
pub fn min_fde<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (k, t) = check(pred, truth)?;
    Ok((0..k)
        .map(|m| dist(pred, truth, m, t - 1))
        .fold(f64::INFINITY, f64::min))
}

/// Metrics averaged over every ego of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub minade: f64,
    pub minfde: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_agents: usize,
}

/// Seed of the prediction of ego `i` in window `w`.
pub fn ego_seed(seed: u64, w: usize, i: usize) -> u64 {
    mix_seed(mix_seed(seed, w as u64), i as u64)
}

/// Metrics for every prefix `K` in `ks` of the same `max(ks)` sampled modes.
pub fn evaluate_prefixes<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    windows: &[SceneWindow],
    ks: &[usize],
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if kmax == 0 || ks.contains(&0) {
        return Err(Error::config("K must be at least 1"));
    }
    // per ego: (minADE per K, minFDE per K)
    type PerEgo = (Vec<f64>, Vec<f64>);
    let per_window: Vec<Result<Vec<PerEgo>>> = windows
        .par_iter()
        .enumerate()
        .map(|(w, win)| {
            win.ego_indices()
                .into_iter()
                .map(|i| {
                    let (p, _) = predict(store, cfg, win, i, kmax, ego_seed(seed, w, i))?;
                    let truth =
                        Tensor::from_points(win.future(i).expect("ego-eligible"))?.cast::<T>();
                    let mut ade = Vec::with_capacity(ks.len());
                    let mut fde = Vec::with_capacity(ks.len());
                    for &k in ks {
                        let modes = (0..k)
                            .map(|m| p.trajectories.index0(m))
                            .collect::<Result<Vec<_>>>()?;
                        let prefix = Tensor::stack(&modes)?;
                        ade.push(min_ade(&prefix, &truth)?);
                        fde.push(min_fde(&prefix, &truth)?);
                    }
                    Ok((ade, fde))
                })
                .collect()
        })
        .collect();
    let mut sums = vec![(0.0, 0.0); ks.len()];
    let mut n = 0usize;
    for r in per_window {
        for (ade, fde) in r? {
            for (s, (a, f)) in sums.iter_mut().zip(ade.into_iter().zip(fde)) {
                s.0 += a;
                s.1 += f;
            }
            n += 1;
        }
    }
    let denom = n.max(1) as f64;
    Ok(ks
        .iter()
        .zip(sums)
        .map(|(&k, (a, f))| MetricReport {
            minade: a / denom,
            minfde: f / denom,
            k,
            n_agents: n,
        })
        .collect())
}

/// `minADE_K` / `minFDE_K` over all egos; zero with `n_agents = 0` when the
/// corpus has none.
pub fn evaluate<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    windows: &[SceneWindow],
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    Ok(evaluate_prefixes(store, cfg, windows, &[k], seed)?[0])
}
