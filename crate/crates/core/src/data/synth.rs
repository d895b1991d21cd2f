//! Seeded synthetic pedestrian scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ethucy::RawRecord;
use crate::error::{Error, Result};

/// How turns are assigned to the agents of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnStyle {
    /// Each agent turns independently with `turn_probability`, starting at a
    /// random step and lasting a few steps.
    Independent,
    /// Every scene draws one turn rate shared by all of its agents. The first
    /// `leaders` agents turn from the first step; the others keep straight
    /// until `follower_onset` and then turn with the same rate. With
    /// `heading_spread`, initial headings are drawn from `±heading_spread`
    /// around +x instead of the full circle.
    SceneShared {
        leaders: usize,
        follower_onset: usize,
        #[serde(default)]
        heading_spread: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub n_agents: usize,
    pub n_frames: usize,
    pub frame_interval: i64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub turn_probability: f64,
    /// Turn rates are drawn from ±[turn_rate_max/4, turn_rate_max] rad/step.
    pub turn_rate_max: f64,
    pub jitter: f64,
    /// Agents start inside the square `[-arena, arena]²`.
    pub arena: f64,
    pub style: TurnStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 16,
            n_agents: 4,
            n_frames: 20,
            frame_interval: 10,
            speed_min: 0.4,
            speed_max: 0.6,
            turn_probability: 0.3,
            turn_rate_max: 0.2,
            jitter: 0.0,
            arena: 5.0,
            style: TurnStyle::Independent,
        }
    }
}

/// One generated scene file.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub name: String,
    pub records: Vec<RawRecord>,
}

struct Motion {
    start: [f64; 2],
    heading: f64,
    speed: f64,
    onset: usize,
    duration: usize,
    rate: f64,
}

impl Motion {
    fn path(&self, frames: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(frames);
        let mut p = self.start;
        let mut h = self.heading;
        out.push(p);
        for t in 0..frames.saturating_sub(1) {
            if t >= self.onset && t < self.onset + self.duration {
                h += self.rate;
            }
            p = [p[0] + self.speed * h.cos(), p[1] + self.speed * h.sin()];
            out.push(p);
        }
        out
    }
}

fn signed_rate(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    let mag = rng.random_range(0.25 * max..=max);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Generates `n_scenes` scenes; identical seeds give identical records.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthScene>> {
    if cfg.n_agents == 0 {
        return Err(Error::config("synthetic scenes need at least one agent"));
    }
    if cfg.speed_min > cfg.speed_max
        || cfg.jitter < 0.0
        || !(0.0..=1.0).contains(&cfg.turn_probability)
    {
        return Err(Error::config(
            "invalid synthetic speed, jitter or turn probability",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.jitter.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for s in 0..cfg.n_scenes {
        let shared_rate = signed_rate(&mut rng, cfg.turn_rate_max.max(1e-12));
        let mut records = Vec::new();
        for a in 0..cfg.n_agents {
            let start = [
                rng.random_range(-cfg.arena..=cfg.arena),
                rng.random_range(-cfg.arena..=cfg.arena),
            ];
            let heading = match cfg.style {
                TurnStyle::SceneShared {
                    heading_spread: Some(w),
                    ..
                } => rng.random_range(-w..=w),
                _ => rng.random_range(0.0..std::f64::consts::TAU),
            };
            let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
            let (onset, duration, rate) = match cfg.style {
                TurnStyle::Independent => {
                    if cfg.turn_rate_max > 0.0 && rng.random_bool(cfg.turn_probability) {
                        let onset = rng.random_range(0..cfg.n_frames.max(2) - 1);
                        let duration = rng.random_range(3..=8);
                        (onset, duration, signed_rate(&mut rng, cfg.turn_rate_max))
                    } else {
                        (0, 0, 0.0)
                    }
                }
                TurnStyle::SceneShared {
                    leaders,
                    follower_onset,
                    ..
                } => {
                    let onset = if a < leaders { 0 } else { follower_onset };
                    (onset, cfg.n_frames, shared_rate)
                }
            };
            let motion = Motion {
                start,
                heading,
                speed,
                onset,
                duration,
                rate,
            };
            for (t, p) in motion.path(cfg.n_frames).into_iter().enumerate() {
                let (jx, jy) = if cfg.jitter > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                records.push(RawRecord {
                    frame: t as i64 * cfg.frame_interval,
                    agent_id: a as i64 + 1,
                    x: p[0] + jx,
                    y: p[1] + jy,
                });
            }
        }
        scenes.push(SynthScene {
            name: format!("scene_{s:03}"),
            records,
        });
    }
    Ok(scenes)
}
