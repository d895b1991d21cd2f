//! Fixed-horizon scene windows cut from trajectory records.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::ethucy::RawRecord;
use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Observation/future lengths and the ego-predictor split of the observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub t_h: usize,
    pub t_f: usize,
    pub t_a: usize,
    pub t_b: usize,
}

impl HorizonConfig {
    /// 8 observed and 12 future steps, observation split 4 + 4.
    pub const PEDESTRIAN: HorizonConfig = HorizonConfig {
        t_h: 8,
        t_f: 12,
        t_a: 4,
        t_b: 4,
    };

    pub fn new(t_h: usize, t_f: usize, t_a: usize, t_b: usize) -> Result<Self> {
        let h = Self { t_h, t_f, t_a, t_b };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { t_h, t_f, t_a, t_b } = *self;
        if t_h == 0 || t_f == 0 {
            return Err(Error::config("t_h and t_f must be positive"));
        }
        if t_a + t_b != t_h {
            return Err(Error::config(format!(
                "t_a + t_b = {} must equal t_h = {t_h}",
                t_a + t_b
            )));
        }
        if t_a < 2 || t_b < 1 {
            return Err(Error::config(format!(
                "need t_a ≥ 2 and t_b ≥ 1, got {t_a}/{t_b}"
            )));
        }
        if t_b > t_f {
            return Err(Error::config(format!("t_b = {t_b} exceeds t_f = {t_f}")));
        }
        Ok(())
    }

    /// Full-rehearsal length seen by the final predictor.
    pub fn conditioned_len(&self) -> usize {
        self.t_h + self.t_b
    }
}

/// One prediction sample: every agent present over the observation span.
///
/// Agents with all `t_h + t_f` positions are ego-eligible; neighbours that
/// leave early carry only their `t_h` observed positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneWindow {
    pub agent_ids: Vec<i64>,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    pub positions: Vec<Vec<Point>>,
    #[serde(default)]
    pub start_frame: i64,
}

impl SceneWindow {
    pub fn new(
        agent_ids: Vec<i64>,
        t_h: usize,
        t_f: usize,
        dt: f64,
        positions: Vec<Vec<Point>>,
    ) -> Result<Self> {
        let w = Self {
            agent_ids,
            t_h,
            t_f,
            dt,
            positions,
            start_frame: 0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_h == 0 || self.t_f == 0 {
            return Err(Error::Data("window horizons must be positive".into()));
        }
        if self.agent_ids.len() != self.positions.len() || self.agent_ids.is_empty() {
            return Err(Error::Data(format!(
                "window lists {} agents but {} trajectories",
                self.agent_ids.len(),
                self.positions.len()
            )));
        }
        let unique: BTreeSet<_> = self.agent_ids.iter().collect();
        if unique.len() != self.agent_ids.len() {
            return Err(Error::Data("duplicate agent ids in window".into()));
        }
        for (id, p) in self.agent_ids.iter().zip(&self.positions) {
            if p.len() != self.t_h && p.len() != self.t_h + self.t_f {
                return Err(Error::Data(format!(
                    "agent {id} has {} positions, expected {} or {}",
                    p.len(),
                    self.t_h,
                    self.t_h + self.t_f
                )));
            }
            if p.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("agent {id} has non-finite positions")));
            }
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn index_of(&self, agent_id: i64) -> Option<usize> {
        self.agent_ids.iter().position(|&a| a == agent_id)
    }

    pub fn is_ego_eligible(&self, idx: usize) -> bool {
        self.positions[idx].len() == self.t_h + self.t_f
    }

    /// Indices of agents with a complete future.
    pub fn ego_indices(&self) -> Vec<usize> {
        (0..self.num_agents())
            .filter(|&i| self.is_ego_eligible(i))
            .collect()
    }

    pub fn observed(&self, idx: usize) -> &[Point] {
        &self.positions[idx][..self.t_h]
    }

    pub fn future(&self, idx: usize) -> Option<&[Point]> {
        self.is_ego_eligible(idx)
            .then(|| &self.positions[idx][self.t_h..])
    }

    /// Position at the current (last observed) step.
    pub fn current(&self, idx: usize) -> Point {
        self.positions[idx][self.t_h - 1]
    }

    /// Same scene moved by `shift`.
    pub fn translated(&self, shift: Point) -> Self {
        let mut w = self.clone();
        for traj in &mut w.positions {
            for p in traj.iter_mut() {
                p[0] += shift[0];
                p[1] += shift[1];
            }
        }
        w
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(line)?;
        w.validate()?;
        Ok(w)
    }
}

/// Most common positive gap between consecutive frames of the same agent;
/// ties resolve to the smaller gap.
pub fn infer_frame_interval(records: &[RawRecord]) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for pair in records.windows(2) {
        if pair[0].agent_id == pair[1].agent_id {
            let gap = pair[1].frame - pair[0].frame;
            if gap > 0 {
                *counts.entry(gap).or_default() += 1;
            }
        }
    }
    let max = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == max).map(|(g, _)| g)
}

struct Segment {
    agent_id: i64,
    start: i64,
    points: Vec<Point>,
}

fn segments(records: &[RawRecord], interval: i64) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    let mut prev: Option<&RawRecord> = None;
    for r in records {
        let continues = prev
            .map(|p| p.agent_id == r.agent_id && r.frame - p.frame == interval)
            .unwrap_or(false);
        if continues {
            out.last_mut().unwrap().points.push([r.x, r.y]);
        } else {
            out.push(Segment {
                agent_id: r.agent_id,
                start: r.frame,
                points: vec![[r.x, r.y]],
            });
        }
        prev = Some(r);
    }
    out
}

/// Cuts windows of `t_h + t_f` equally spaced frames, one per start frame on
/// the sampling grid every `stride` intervals, keeping starts where at least
/// one agent spans the whole window.
pub fn build_windows(
    records: &[RawRecord],
    t_h: usize,
    t_f: usize,
    stride: usize,
    dt: f64,
) -> Result<Vec<SceneWindow>> {
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    if t_h == 0 || t_f == 0 {
        return Err(Error::config("t_h and t_f must be positive"));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.agent_id, r.frame));
    let Some(interval) = infer_frame_interval(&sorted) else {
        return Ok(Vec::new());
    };
    let segs = segments(&sorted, interval);
    let total = (t_h + t_f) as i64;
    let min_frame = sorted.iter().map(|r| r.frame).min().unwrap();
    let step = interval * stride as i64;
    let starts: BTreeSet<i64> = sorted
        .iter()
        .map(|r| r.frame)
        .filter(|f| (f - min_frame) % step == 0)
        .collect();

    let mut windows = Vec::new();
    for s in starts {
        let mut members: Vec<(i64, Vec<Point>)> = Vec::new();
        let mut any_full = false;
        for seg in &segs {
            if seg.start > s || (s - seg.start) % interval != 0 {
                continue;
            }
            let offset = ((s - seg.start) / interval) as usize;
            let avail = seg.points.len().saturating_sub(offset) as i64;
            if avail >= total {
                any_full = true;
                members.push((
                    seg.agent_id,
                    seg.points[offset..offset + total as usize].to_vec(),
                ));
            } else if avail >= t_h as i64 {
                members.push((seg.agent_id, seg.points[offset..offset + t_h].to_vec()));
            }
        }
        if !any_full {
            continue;
        }
        members.sort_by_key(|m| m.0);
        let (agent_ids, positions): (Vec<_>, Vec<_>) = members.into_iter().unzip();
        let mut w = SceneWindow::new(agent_ids, t_h, t_f, dt, positions)?;
        w.start_frame = s;
        windows.push(w);
    }
    Ok(windows)
}

/// Windows of one scene file.
#[derive(Clone, Debug)]
pub struct SceneFile {
    pub name: String,
    pub windows: Vec<SceneWindow>,
}

/// Train on every file except `held_out`, test on `held_out`.
pub fn split_leave_one_out(
    files: &[SceneFile],
    held_out: &str,
) -> Result<(Vec<SceneWindow>, Vec<SceneWindow>)> {
    if !files.iter().any(|f| f.name == held_out) {
        let names: Vec<&str> = files.iter().map(|f| f.name.as_str()).collect();
        return Err(Error::config(format!(
            "held-out scene {held_out:?} not among {names:?}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for f in files {
        if f.name == held_out {
            test.extend(f.windows.iter().cloned());
        } else {
            train.extend(f.windows.iter().cloned());
        }
    }
    Ok((train, test))
}
