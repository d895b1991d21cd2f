//! Attention encoder over the ego's own conditioned sequence, decoding
//! `K` full-horizon modes from per-mode Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{register_embedding, BundleVars, ConditioningBundle};
use crate::data::{HorizonConfig, Point};
use crate::error::{Error, Result};
use crate::losses::best_of_k_loss;
use crate::numerics::nn::{
    encoder_layer, register_encoder_layer, register_mlp, sinusoidal_encoding,
};
use crate::numerics::{mlp_forward, Activation, Graph, ParameterStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinalConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub k: usize,
    pub noise_dim: usize,
}

impl Default for FinalConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 8,
            d_model: 128,
            k: 20,
            noise_dim: 16,
        }
    }
}

impl FinalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "final width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// `K × t_f × 2` predictions in scene coordinates and the per-mode noise seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalPrediction<T> {
    pub trajectories: Tensor<T>,
    pub noise_seeds: Vec<u64>,
}

/// SplitMix64 finalizer of `a ⊕ golden·(b+1)`.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise of mode `k` depends only on `(seed, k)`, so the first `K` modes of
/// a larger draw are the `K` modes of a smaller one.
pub fn mode_noise(seed: u64, k: usize, dim: usize) -> (u64, Vec<f64>) {
    let s = mix_seed(seed, k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    (s, (0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Layer layout under the `fin.` prefix, including the trajectory embedding
/// used by the conditioning step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalPredictor {
    pub horizon: HorizonConfig,
    pub cfg: FinalConfig,
}

impl FinalPredictor {
    pub fn new(horizon: HorizonConfig, cfg: FinalConfig) -> Result<Self> {
        horizon.validate()?;
        cfg.validate()?;
        Ok(Self { horizon, cfg })
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let d = self.cfg.d_model;
        register_embedding(store, d, rng)?;
        store.insert_affine("fin.traj", 2, d, rng)?;
        for l in 0..self.cfg.layers {
            register_encoder_layer(store, &format!("fin.enc.{l}"), d, 2 * d, rng)?;
        }
        register_mlp(
            store,
            "fin.dec",
            &[d + self.cfg.noise_dim, 2 * d, self.horizon.t_f * 2],
            rng,
        )
    }

    /// Predictions for `k` modes from the bundle nodes of the ego's own pair.
    pub fn forward_var<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        bundle: &BundleVars,
        k: usize,
        seed: u64,
    ) -> Result<(Var, Vec<u64>)> {
        let len = self.horizon.conditioned_len();
        let d = self.cfg.d_model;
        if g.shape(bundle.pooled) != [len, d] || g.shape(bundle.mean) != [len, 2] {
            return Err(Error::config(format!(
                "bundle {:?}/{:?} does not fit a {len}-token, width-{d} final predictor",
                g.shape(bundle.pooled),
                g.shape(bundle.mean)
            )));
        }
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        let o = bundle.origin;
        let origin_rows: Vec<f64> = (0..len).flat_map(|_| o).collect();
        let origin_rows = g.constant(Tensor::from_f64(&[len, 2], &origin_rows)?);
        let mean = g.sub(bundle.mean, origin_rows)?;
        let w = g.param("fin.traj.w")?;
        let b = g.param("fin.traj.b")?;
        let traj = g.linear(mean, w, Some(b))?;
        let mut h = g.add(bundle.pooled, traj)?;
        let pe = g.constant(sinusoidal_encoding(len, d));
        h = g.add(h, pe)?;
        for l in 0..self.cfg.layers {
            h = encoder_layer(g, &format!("fin.enc.{l}"), h, self.cfg.heads)?;
        }
        let summary = g.mean_axis0(h)?;
        let rows = g.stack(&vec![summary; k])?;
        let mut seeds = Vec::with_capacity(k);
        let input = if self.cfg.noise_dim > 0 {
            let mut noise = Vec::with_capacity(k * self.cfg.noise_dim);
            for m in 0..k {
                let (s, z) = mode_noise(seed, m, self.cfg.noise_dim);
                seeds.push(s);
                noise.extend(z);
            }
            let noise = g.constant(Tensor::from_f64(&[k, self.cfg.noise_dim], &noise)?);
            g.concat_last(&[rows, noise])?
        } else {
            seeds.extend((0..k).map(|m| mix_seed(seed, m as u64)));
            rows
        };
        let offsets = mlp_forward(g, "fin.dec", input, 2, Activation::None)?;
        let offsets = g.reshape(offsets, &[k, self.horizon.t_f, 2])?;
        let origin_modes: Vec<f64> = (0..k * self.horizon.t_f).flat_map(|_| o).collect();
        let origin_modes = g.constant(Tensor::from_f64(&[k, self.horizon.t_f, 2], &origin_modes)?);
        Ok((g.add(offsets, origin_modes)?, seeds))
    }

    /// Value-level forward pass from a stored bundle.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        bundle: &ConditioningBundle<T>,
        k: usize,
        seed: u64,
    ) -> Result<FinalPrediction<T>> {
        let mut g = Graph::with_params(store);
        let vars = BundleVars {
            raw: g.constant(bundle.raw_features.clone()),
            pooled: g.constant(bundle.pooled_feature.clone()),
            argmax: bundle.argmax_indices.clone(),
            mean: g.constant(bundle.mean_trajectory.clone()),
            origin: bundle.origin,
        };
        let (p, noise_seeds) = self.forward_var(&mut g, &vars, k, seed)?;
        Ok(FinalPrediction {
            trajectories: g.value(p).clone(),
            noise_seeds,
        })
    }
}

/// Best-of-K mean Euclidean error against the ego's future (`t_f` points).
pub fn final_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, truth: &[Point]) -> Result<Var> {
    let truth = Tensor::from_points(truth)?.cast();
    Ok(best_of_k_loss(g, pred, &truth)?.loss)
}
