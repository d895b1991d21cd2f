//! Best-of-K displacement losses shared by both predictors.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Per-mode mean Euclidean distance and the minimum over modes.
pub struct BestOfK {
    pub loss: Var,
    pub best_mode: usize,
    pub per_mode: Vec<Var>,
}

/// `min_k mean_t ‖pred[k,t,:] − truth[t,:]‖₂`; ties go to the smallest `k`
/// and the gradient flows through the attaining mode only.
pub fn best_of_k_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    pred: Var,
    truth: &Tensor<T>,
) -> Result<BestOfK> {
    let ps = g.shape(pred).to_vec();
    if ps.len() != 3 || ps[2] != 2 || truth.shape() != [ps[1], 2] {
        return Err(Error::dim(format!(
            "prediction {ps:?} does not match ground truth {:?}",
            truth.shape()
        )));
    }
    let truth = g.constant(truth.clone());
    let mut per_mode = Vec::with_capacity(ps[0]);
    for k in 0..ps[0] {
        let mode = g.index0(pred, k)?;
        let diff = g.sub(mode, truth)?;
        let sq = g.square(diff);
        let d2 = g.sum_last(sq);
        let dist = g.sqrt(d2);
        per_mode.push(g.mean_all(dist));
    }
    let mut best_mode = 0;
    for (k, &v) in per_mode.iter().enumerate() {
        if g.value(v).item() < g.value(per_mode[best_mode]).item() {
            best_mode = k;
        }
    }
    Ok(BestOfK {
        loss: per_mode[best_mode],
        best_mode,
        per_mode,
    })
}

/// `final + λ·mean(ego)`; an empty ego list contributes nothing.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    fin: Var,
    ego_losses: &[Var],
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::config(format!(
            "λ must be non-negative, got {lambda}"
        )));
    }
    if ego_losses.is_empty() {
        return Ok(fin);
    }
    let stacked = g.stack(ego_losses)?;
    let mean = g.mean_all(stacked);
    let weighted = g.scale(mean, T::lit(lambda));
    g.add(fin, weighted)
}
