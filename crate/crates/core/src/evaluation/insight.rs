use serde::Serialize;

use crate::data::SceneWindow;
use crate::ego::{EgoPass, Phase};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Graph, ParameterStore, Tensor};
use crate::scalar::Scalar;

/// Column means of a `T × K_I` kernel.
pub fn temporal_mean<T: Scalar>(kernel: &Tensor<T>) -> Result<Vec<f64>> {
    let s = kernel.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::dim(format!(
            "expected a non-empty T×K_I kernel, got {s:?}"
        )));
    }
    let (t, k) = (s[0], s[1]);
    Ok((0..k)
        .map(|c| (0..t).map(|r| kernel.get(&[r, c]).as_f64()).sum::<f64>() / t as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InsightRow {
    pub window: usize,
    pub ego_id: i64,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InsightSummary {
    pub k_i: usize,
    pub rows: Vec<InsightRow>,
}

impl InsightSummary {
    /// `window,ego_id,insight_0..insight_{K_I-1}`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["window".to_string(), "ego_id".into()];
        header.extend((0..self.k_i).map(|k| format!("insight_{k}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.window.to_string(), r.ego_id.to_string()];
            rec.extend(r.mean.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Temporal mean of every ego's inference-phase insight kernel.
pub fn insight_summary<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    windows: &[SceneWindow],
) -> Result<InsightSummary> {
    let pred = cfg.ego_predictor()?;
    let mut rows = Vec::new();
    for (w, win) in windows.iter().enumerate() {
        let mut g = Graph::with_params(store);
        let mut pass = EgoPass::new(pred, win, Phase::Inference)?;
        for i in win.ego_indices() {
            let ins = pass.insight(&mut g, i)?;
            rows.push(InsightRow {
                window: w,
                ego_id: win.agent_ids[i],
                mean: temporal_mean(g.value(ins))?,
            });
        }
    }
    Ok(InsightSummary {
        k_i: cfg.ego.k_i,
        rows,
    })
}
