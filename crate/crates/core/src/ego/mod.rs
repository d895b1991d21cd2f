//! Biased short-term rehearsals for ego–neighbor pairs.
//!
//! Each agent's input span is linearly separated, Haar-transformed and
//! encoded once per phase. The ego contributes an insight kernel, the
//! neighbor a reverberation kernel and its per-feature similarity tensor;
//! a bilinear transform of the three gives the neighbor's residual future
//! as seen by the ego.

mod pass;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{haar_forward, linear_fit_separate, HorizonConfig, Point};
use crate::error::{Error, Result};
use crate::numerics::nn::{
    encoder_layer, register_encoder_layer, register_mlp, sinusoidal_encoding,
};
use crate::numerics::{mlp_forward, Activation, Graph, ParameterStore, Tensor, Var};
use crate::scalar::Scalar;

pub use pass::{
    ego_loss, linear_rehearsal, partition_neighbors, predict_rehearsals, EgoPass, NeighborPartition,
};

/// Which agent's insight kernel directs the rehearsal of neighbor `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// `j←i`: the ego's own kernel, shared over all of its pairs.
    #[default]
    Biased,
    /// `j←j`: every neighbor rehearses under its own kernel.
    SelfOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoConfig {
    pub k_i: usize,
    pub d: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub n_ego_neighbors: usize,
    pub haar: bool,
    pub positional_encoding: bool,
    pub bias: BiasMode,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self {
            k_i: 3,
            d: 64,
            enc_layers: 2,
            enc_heads: 2,
            n_ego_neighbors: 5,
            haar: true,
            positional_encoding: false,
            bias: BiasMode::Biased,
        }
    }
}

impl EgoConfig {
    pub fn validate(&self, horizon: &HorizonConfig) -> Result<()> {
        if self.k_i == 0 {
            return Err(Error::config("K_I must be at least 1"));
        }
        if self.d == 0 || self.enc_heads == 0 || !self.d.is_multiple_of(self.enc_heads) {
            return Err(Error::config(format!(
                "ego feature width {} is not divisible by {} heads",
                self.d, self.enc_heads
            )));
        }
        if self.haar && !horizon.t_a.is_multiple_of(2) {
            return Err(Error::config(format!(
                "the Haar transform needs an even t_a, got {}",
                horizon.t_a
            )));
        }
        Ok(())
    }
}

/// Ego-predictor period of a rehearsal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Inputs over the first `t_a` observed steps, outputs over the last `t_b`.
    Training,
    /// Inputs over the last `t_a` observed steps, outputs over the first `t_b`
    /// future steps.
    Inference,
}

impl Phase {
    pub fn input_steps(self, h: &HorizonConfig) -> Range<usize> {
        match self {
            Phase::Training => 0..h.t_a,
            Phase::Inference => h.t_h - h.t_a..h.t_h,
        }
    }

    pub fn output_steps(self, h: &HorizonConfig) -> Range<usize> {
        match self {
            Phase::Training => h.t_a..h.t_h,
            Phase::Inference => h.t_h..h.t_h + h.t_b,
        }
    }
}

/// `K_I × t_b × 2` rehearsals in scene coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RehearsalSet<T> {
    pub trajectories: Tensor<T>,
    pub phase: Phase,
}

impl<T: Scalar> RehearsalSet<T> {
    pub fn new(trajectories: Tensor<T>, phase: Phase) -> Result<Self> {
        let s = trajectories.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::dim(format!(
                "rehearsals must be K_I×t_b×2, got {s:?}"
            )));
        }
        if !trajectories.is_finite() {
            return Err(Error::Numeric("non-finite rehearsal".into()));
        }
        Ok(Self {
            trajectories,
            phase,
        })
    }

    pub fn modes(&self) -> usize {
        self.trajectories.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelPair<T> {
    /// `t_a × K_I`
    pub insight: Tensor<T>,
    /// `t_a × t_b`
    pub reverberation: Tensor<T>,
}

/// Layer layout and forward pieces of the ego predictor. Parameters live
/// under the `ego.` prefix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoPredictor {
    pub horizon: HorizonConfig,
    pub cfg: EgoConfig,
}

impl EgoPredictor {
    pub fn new(horizon: HorizonConfig, cfg: EgoConfig) -> Result<Self> {
        horizon.validate()?;
        cfg.validate(&horizon)?;
        Ok(Self { horizon, cfg })
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let d = self.cfg.d;
        register_mlp(store, "ego.embed", &[2, d, d], rng)?;
        for l in 0..self.cfg.enc_layers {
            register_encoder_layer(store, &format!("ego.enc.{l}"), d, 2 * d, rng)?;
        }
        register_mlp(store, "ego.reverb", &[d, d, d, self.horizon.t_b], rng)?;
        register_mlp(store, "ego.insight", &[d, d, d, self.cfg.k_i], rng)?;
        // zero decoder weight: rehearsals start at the linear continuation
        store.insert("ego.dec.w", Tensor::zeros(&[d, 2]))?;
        store.insert("ego.dec.b", Tensor::zeros(&[2]))
    }

    /// Encoder input for one agent: the linear-fit residual of its input
    /// span, Haar-transformed when enabled. The residual does not depend on
    /// where the span sits in the scene, so no translation is needed here.
    pub fn preprocess(&self, span: &[Point]) -> Result<Vec<Point>> {
        if span.len() != self.horizon.t_a {
            return Err(Error::dim(format!(
                "ego input span has {} steps, expected t_a = {}",
                span.len(),
                self.horizon.t_a
            )));
        }
        let (_, residual) = linear_fit_separate(span)?;
        if self.cfg.haar {
            haar_forward(&residual)
        } else {
            Ok(residual)
        }
    }

    /// `t_a×2 → t_a×d`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &Tensor<T>) -> Result<Var> {
        if x.shape() != [self.horizon.t_a, 2] {
            return Err(Error::dim(format!(
                "ego encoder expects {}×2 input, got {:?}",
                self.horizon.t_a,
                x.shape()
            )));
        }
        let x = g.constant(x.clone());
        let mut h = mlp_forward(g, "ego.embed", x, 2, Activation::None)?;
        if self.cfg.positional_encoding {
            let pe = g.constant(sinusoidal_encoding(self.horizon.t_a, self.cfg.d));
            h = g.add(h, pe)?;
        }
        for l in 0..self.cfg.enc_layers {
            h = encoder_layer(g, &format!("ego.enc.{l}"), h, self.cfg.enc_heads)?;
        }
        Ok(h)
    }

    /// `t_a×d → t_a×t_b`.
    pub fn reverberation_kernel<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        mlp_forward(g, "ego.reverb", f, 3, Activation::None)
    }

    /// `t_a×d → t_a×K_I`.
    pub fn insight_kernel<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        mlp_forward(g, "ego.insight", f, 3, Activation::None)
    }

    /// `t_a×d → t_a×t_a×d`, one outer product per feature column.
    pub fn similarity<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        g.outer_columns(f)
    }

    /// `Iᵀ F_n R` for every feature slice: `K_I×t_b×d`.
    pub fn bilinear_rehearse<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        insight: Var,
        sim: Var,
        reverb: Var,
    ) -> Result<Var> {
        g.bilinear(insight, sim, reverb)
    }

    /// Per-step affine map `d → 2`: residual rehearsals `K_I×t_b×2`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, fbar: Var) -> Result<Var> {
        let w = g.param("ego.dec.w")?;
        let b = g.param("ego.dec.b")?;
        g.linear(fbar, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EgoPredictor {
        let cfg = EgoConfig {
            d: 8,
            ..EgoConfig::default()
        };
        EgoPredictor::new(HorizonConfig::PEDESTRIAN, cfg).unwrap()
    }

    fn store(p: &EgoPredictor, seed: u64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        p.register(&mut s, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        s
    }

    #[test]
    fn config_validation() {
        let h = HorizonConfig::PEDESTRIAN;
        assert!(EgoConfig {
            k_i: 0,
            ..EgoConfig::default()
        }
        .validate(&h)
        .is_err());
        assert!(EgoConfig {
            d: 63,
            ..EgoConfig::default()
        }
        .validate(&h)
        .is_err());
        let odd = HorizonConfig::new(7, 12, 3, 4).unwrap();
        assert!(EgoConfig::default().validate(&odd).is_err());
        assert!(EgoConfig {
            haar: false,
            ..EgoConfig::default()
        }
        .validate(&odd)
        .is_ok());
    }

    #[test]
    fn phase_ranges() {
        let h = HorizonConfig::PEDESTRIAN;
        assert_eq!(Phase::Training.input_steps(&h), 0..4);
        assert_eq!(Phase::Training.output_steps(&h), 4..8);
        assert_eq!(Phase::Inference.input_steps(&h), 4..8);
        assert_eq!(Phase::Inference.output_steps(&h), 8..12);
    }

    #[test]
    fn encoder_and_kernel_shapes() {
        let p = EgoPredictor::new(HorizonConfig::PEDESTRIAN, EgoConfig::default()).unwrap();
        let s = store(&p, 1);
        let mut g = Graph::with_params(&s);
        let x = Tensor::from_f64(&[4, 2], &[0.1, 0.0, -0.2, 0.1, 0.0, 0.3, 0.1, -0.1]).unwrap();
        let f = p.encode(&mut g, &x).unwrap();
        assert_eq!(g.shape(f), [4, 64]);
        let r = p.reverberation_kernel(&mut g, f).unwrap();
        assert_eq!(g.shape(r), [4, 4]);
        let i = p.insight_kernel(&mut g, f).unwrap();
        assert_eq!(g.shape(i), [4, 3]);
        let sim = p.similarity(&mut g, f).unwrap();
        let fbar = p.bilinear_rehearse(&mut g, i, sim, r).unwrap();
        assert_eq!(g.shape(fbar), [3, 4, 64]);
        let out = p.decode(&mut g, fbar).unwrap();
        assert_eq!(g.shape(out), [3, 4, 2]);
        assert!(p.encode(&mut g, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn two_step_horizon_kernels() {
        let h = HorizonConfig::new(4, 6, 2, 2).unwrap();
        let p = EgoPredictor::new(
            h,
            EgoConfig {
                d: 8,
                ..EgoConfig::default()
            },
        )
        .unwrap();
        let s = store(&p, 2);
        let mut g = Graph::with_params(&s);
        let f = p
            .encode(
                &mut g,
                &Tensor::from_f64(&[2, 2], &[0.1, 0.2, -0.1, 0.0]).unwrap(),
            )
            .unwrap();
        let r = p.reverberation_kernel(&mut g, f).unwrap();
        assert_eq!(g.shape(r), [2, 2]);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let p = small();
        let mut s = store(&p, 3);
        for name in ["ego.embed.0.w", "ego.embed.1.w"] {
            let shape = s.value(name).unwrap().shape().to_vec();
            s.set_value(name, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::with_params(&s);
        let f = p.encode(&mut g, &Tensor::zeros(&[4, 2])).unwrap();
        let v = g.value(f);
        for t in 1..4 {
            for n in 0..8 {
                assert_eq!(v.get(&[t, n]), v.get(&[0, n]));
            }
        }
        let r = p.reverberation_kernel(&mut g, f).unwrap();
        let rv = g.value(r);
        for b in 0..4 {
            assert_eq!(rv.get(&[1, b]), rv.get(&[0, b]));
        }
    }

    #[test]
    fn decoder_bias_only() {
        let p = small();
        let mut s = store(&p, 4);
        s.set_value("ego.dec.w", Tensor::zeros(&[8, 2])).unwrap();
        s.set_value("ego.dec.b", Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap())
            .unwrap();
        let mut g = Graph::with_params(&s);
        let fbar = g.constant(Tensor::full(&[3, 4, 8], 2.0));
        let out = p.decode(&mut g, fbar).unwrap();
        for pair in g.value(out).data().chunks(2) {
            assert_eq!(pair, [0.5, -1.5]);
        }
    }

    #[test]
    fn decoder_is_affine() {
        let p = small();
        let s = store(&p, 5);
        let mut g = Graph::with_params(&s);
        let base: Vec<f64> = (0..3 * 4 * 8).map(|v| (v as f64 * 0.37).sin()).collect();
        let f1 = g.constant(Tensor::new(&[3, 4, 8], base.clone()).unwrap());
        let f2 =
            g.constant(Tensor::new(&[3, 4, 8], base.iter().map(|v| 2.0 * v).collect()).unwrap());
        let f0 = g.constant(Tensor::zeros(&[3, 4, 8]));
        let (o1, o2, o0) = (
            p.decode(&mut g, f1).unwrap(),
            p.decode(&mut g, f2).unwrap(),
            p.decode(&mut g, f0).unwrap(),
        );
        for ((a, b), c) in g
            .value(o1)
            .data()
            .iter()
            .zip(g.value(o2).data())
            .zip(g.value(o0).data())
        {
            assert!(((b - c) - 2.0 * (a - c)).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_matches_factorized_oracle() {
        // out[k,b,n] = (Iᵀ f)[k,n] · (Rᵀ f)[b,n] when F_n = f_n f_nᵀ
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ta, ki, tb, d) = (4, 3, 5, 6);
        let mut rand =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (fv, iv, rv) = (rand(ta * d), rand(ta * ki), rand(ta * tb));
        let p = small();
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new(&[ta, d], fv.clone()).unwrap());
        let i = g.constant(Tensor::new(&[ta, ki], iv.clone()).unwrap());
        let r = g.constant(Tensor::new(&[ta, tb], rv.clone()).unwrap());
        let sim = p.similarity(&mut g, f).unwrap();
        let out = p.bilinear_rehearse(&mut g, i, sim, r).unwrap();
        let out = g.value(out);
        for k in 0..ki {
            for b in 0..tb {
                for n in 0..d {
                    let left: f64 = (0..ta).map(|t| iv[t * ki + k] * fv[t * d + n]).sum();
                    let right: f64 = (0..ta).map(|t| rv[t * tb + b] * fv[t * d + n]).sum();
                    assert!((out.get(&[k, b, n]) - left * right).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn similarity_slices_symmetric_and_zero_column() {
        let p = small();
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 0.0, 2.0, 0.0, -0.5, 0.0]).unwrap());
        let sim = p.similarity(&mut g, f).unwrap();
        let v = g.value(sim);
        for s in 0..3 {
            for u in 0..3 {
                assert_eq!(v.get(&[s, u, 0]), v.get(&[u, s, 0]));
                assert_eq!(v.get(&[s, u, 1]), 0.0);
            }
        }
        assert_eq!(v.get(&[0, 1, 0]), 2.0);
        assert_eq!(v.get(&[1, 1, 0]), 4.0);
    }

    #[test]
    fn bilinear_zero_similarity_and_insight_scaling() {
        let p = small();
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::from_f64(&[2, 2], &[0.3, -1.0, 0.7, 0.2]).unwrap());
        let i2 = g.constant(Tensor::from_f64(&[2, 2], &[0.6, -2.0, 1.4, 0.4]).unwrap());
        let r = g.constant(Tensor::from_f64(&[2, 1], &[0.5, 1.5]).unwrap());
        let zero = g.constant(Tensor::zeros(&[2, 2, 3]));
        let out = p.bilinear_rehearse(&mut g, i, zero, r).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let f = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 0.5, -1.0, 0.25, 3.0]).unwrap());
        let sim = p.similarity(&mut g, f).unwrap();
        let a = p.bilinear_rehearse(&mut g, i, sim, r).unwrap();
        let b = p.bilinear_rehearse(&mut g, i2, sim, r).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn preprocess_linear_span_is_zero() {
        let p = small();
        let span: Vec<Point> = (0..4)
            .map(|t| [0.5 * t as f64 + 3.0, -0.25 * t as f64])
            .collect();
        let x = p.preprocess(&span).unwrap();
        assert!(x.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(p.preprocess(&span[..3]).is_err());
    }
}
