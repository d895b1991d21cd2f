//! Per-window evaluation of the ego predictor with shared per-agent pieces.

use crate::data::{
    linear_extrapolate, linear_fit_separate, translate_to_ego_origin, Point, SceneWindow,
};
use crate::ego::{BiasMode, EgoPredictor, KernelPair, Phase, RehearsalSet};
use crate::error::{Error, Result};
use crate::losses::best_of_k_loss;
use crate::numerics::{Graph, ParameterStore, Tensor, Var};
use crate::scalar::Scalar;

/// Window-local agent indices split by how their rehearsals are produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborPartition {
    pub ego: usize,
    /// The ego first, then neighbors by increasing distance.
    pub ego_predicted: Vec<usize>,
    /// Remaining agents, in window order.
    pub linear_predicted: Vec<usize>,
}

/// The ego plus its `n` nearest neighbors at the current step go to the ego
/// predictor; distance ties go to the smaller agent id.
pub fn partition_neighbors(window: &SceneWindow, ego: usize, n: usize) -> NeighborPartition {
    let c = window.current(ego);
    let mut others: Vec<(f64, i64, usize)> = (0..window.num_agents())
        .filter(|&j| j != ego)
        .map(|j| {
            let p = window.current(j);
            ((p[0] - c[0]).hypot(p[1] - c[1]), window.agent_ids[j], j)
        })
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut ego_predicted = vec![ego];
    ego_predicted.extend(others.iter().take(n).map(|o| o.2));
    let mut linear_predicted: Vec<usize> = others.iter().skip(n).map(|o| o.2).collect();
    linear_predicted.sort_unstable();
    NeighborPartition {
        ego,
        ego_predicted,
        linear_predicted,
    }
}

fn tile_modes<T: Scalar>(points: &[Point], k: usize) -> Tensor<T> {
    let one: Vec<f64> = points.iter().flatten().copied().collect();
    let data: Vec<f64> = (0..k).flat_map(|_| one.iter().copied()).collect();
    Tensor::from_f64(&[k, points.len(), 2], &data).expect("non-empty rehearsal span")
}

fn check_window(pred: &EgoPredictor, window: &SceneWindow) -> Result<()> {
    if window.t_h != pred.horizon.t_h {
        return Err(Error::config(format!(
            "window observes {} steps, model expects t_h = {}",
            window.t_h, pred.horizon.t_h
        )));
    }
    Ok(())
}

/// Least-squares continuation of agent `j` over the phase's output steps,
/// replicated `K_I` times.
pub fn linear_rehearsal<T: Scalar>(
    pred: &EgoPredictor,
    window: &SceneWindow,
    j: usize,
    phase: Phase,
) -> Result<RehearsalSet<T>> {
    check_window(pred, window)?;
    let h = &pred.horizon;
    let (fit, _) = linear_fit_separate(&window.positions[j][phase.input_steps(h)])?;
    let ext = linear_extrapolate(&fit, h.t_b, h.t_a);
    RehearsalSet::new(tile_modes(&ext, pred.cfg.k_i), phase)
}

/// Caches encoder features and kernels of one window and phase so that
/// every agent is encoded once and every ego's insight kernel is computed
/// once, whatever the number of pairs.
pub struct EgoPass<'w> {
    pred: EgoPredictor,
    window: &'w SceneWindow,
    phase: Phase,
    features: Vec<Option<Var>>,
    reverb: Vec<Option<Var>>,
    sim: Vec<Option<Var>>,
    insight: Vec<Option<Var>>,
}

impl<'w> EgoPass<'w> {
    pub fn new(pred: EgoPredictor, window: &'w SceneWindow, phase: Phase) -> Result<Self> {
        check_window(&pred, window)?;
        let n = window.num_agents();
        Ok(Self {
            pred,
            window,
            phase,
            features: vec![None; n],
            reverb: vec![None; n],
            sim: vec![None; n],
            insight: vec![None; n],
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn window(&self) -> &'w SceneWindow {
        self.window
    }

    fn input(&self, j: usize) -> &'w [Point] {
        &self.window.positions[j][self.phase.input_steps(&self.pred.horizon)]
    }

    /// Ground truth over the phase's output steps, when the window has it.
    pub fn targets(&self, j: usize) -> Option<&'w [Point]> {
        let steps = self.phase.output_steps(&self.pred.horizon);
        self.window.positions[j].get(steps)
    }

    pub fn features<T: Scalar>(&mut self, g: &mut Graph<'_, T>, j: usize) -> Result<Var> {
        if let Some(v) = self.features[j] {
            return Ok(v);
        }
        let x = self.pred.preprocess(self.input(j))?;
        let f = self.pred.encode(g, &Tensor::from_points(&x)?.cast())?;
        self.features[j] = Some(f);
        Ok(f)
    }

    pub fn insight<T: Scalar>(&mut self, g: &mut Graph<'_, T>, i: usize) -> Result<Var> {
        if let Some(v) = self.insight[i] {
            return Ok(v);
        }
        let f = self.features(g, i)?;
        let v = self.pred.insight_kernel(g, f)?;
        self.insight[i] = Some(v);
        Ok(v)
    }

    pub fn reverberation<T: Scalar>(&mut self, g: &mut Graph<'_, T>, j: usize) -> Result<Var> {
        if let Some(v) = self.reverb[j] {
            return Ok(v);
        }
        let f = self.features(g, j)?;
        let v = self.pred.reverberation_kernel(g, f)?;
        self.reverb[j] = Some(v);
        Ok(v)
    }

    pub fn similarity<T: Scalar>(&mut self, g: &mut Graph<'_, T>, j: usize) -> Result<Var> {
        if let Some(v) = self.sim[j] {
            return Ok(v);
        }
        let f = self.features(g, j)?;
        let v = self.pred.similarity(g, f)?;
        self.sim[j] = Some(v);
        Ok(v)
    }

    /// Insight kernel that directs agent `j` for ego `i` under the bias mode.
    pub fn directing_insight<T: Scalar>(
        &mut self,
        g: &mut Graph<'_, T>,
        i: usize,
        j: usize,
    ) -> Result<Var> {
        match self.pred.cfg.bias {
            BiasMode::Biased => self.insight(g, i),
            BiasMode::SelfOnly => self.insight(g, j),
        }
    }

    pub fn kernels<T: Scalar>(
        &mut self,
        g: &mut Graph<'_, T>,
        i: usize,
        j: usize,
    ) -> Result<KernelPair<T>> {
        let ins = self.directing_insight(g, i, j)?;
        let rev = self.reverberation(g, j)?;
        Ok(KernelPair {
            insight: g.value(ins).clone(),
            reverberation: g.value(rev).clone(),
        })
    }

    /// Decoded residual rehearsals of `j` under an explicit insight kernel.
    pub fn residual_with<T: Scalar>(
        &mut self,
        g: &mut Graph<'_, T>,
        insight: Var,
        j: usize,
    ) -> Result<Var> {
        let sim = self.similarity(g, j)?;
        let rev = self.reverberation(g, j)?;
        let fbar = self.pred.bilinear_rehearse(g, insight, sim, rev)?;
        self.pred.decode(g, fbar)
    }

    /// Linear part of pair `(i, j)`: `j`'s input span moved to `i`'s last
    /// input position, fitted, continued over `t_b` steps and moved back.
    pub fn linear_part(&self, i: usize, j: usize) -> Result<Vec<Point>> {
        let h = &self.pred.horizon;
        let origin = *self.input(i).last().expect("t_a ≥ 2");
        let local = translate_to_ego_origin(self.input(j), origin);
        let (fit, _) = linear_fit_separate(&local)?;
        Ok(linear_extrapolate(&fit, h.t_b, h.t_a)
            .into_iter()
            .map(|p| [p[0] + origin[0], p[1] + origin[1]])
            .collect())
    }

    /// Scene-coordinate rehearsals of `j` for ego `i` under an explicit
    /// insight kernel.
    pub fn rehearse_with<T: Scalar>(
        &mut self,
        g: &mut Graph<'_, T>,
        insight: Var,
        i: usize,
        j: usize,
    ) -> Result<Var> {
        let residual = self.residual_with(g, insight, j)?;
        let lin = self.linear_part(i, j)?;
        let lin = g.constant(tile_modes(&lin, self.pred.cfg.k_i));
        g.add(residual, lin)
    }

    /// `K_I×t_b×2` rehearsals `Ŷ^{j←i}` in scene coordinates.
    pub fn rehearse<T: Scalar>(&mut self, g: &mut Graph<'_, T>, i: usize, j: usize) -> Result<Var> {
        let ins = self.directing_insight(g, i, j)?;
        self.rehearse_with(g, ins, i, j)
    }
}

/// Value-level rehearsals of `j` directed by `i`.
pub fn predict_rehearsals<T: Scalar>(
    store: &ParameterStore<T>,
    pred: &EgoPredictor,
    window: &SceneWindow,
    i: usize,
    j: usize,
    phase: Phase,
) -> Result<RehearsalSet<T>> {
    let mut g = Graph::with_params(store);
    let mut pass = EgoPass::new(*pred, window, phase)?;
    let r = pass.rehearse(&mut g, i, j)?;
    RehearsalSet::new(g.value(r).clone(), phase)
}

/// Best-of-`K_I` mean Euclidean error against `truth` (`t_b` points).
pub fn ego_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, truth: &[Point]) -> Result<Var> {
    let truth = Tensor::from_points(truth)?.cast();
    Ok(best_of_k_loss(g, pred, &truth)?.loss)
}
