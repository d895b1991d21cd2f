//! Layers assembled from graph primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::ParameterStore;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// Activation applied after the final affine map of an MLP. Hidden layers
/// always use ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Registers `dims.len() - 1` affine maps as `{prefix}.{l}.w` / `{prefix}.{l}.b`.
pub fn register_mlp<T: Scalar>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    dims: &[usize],
    rng: &mut impl Rng,
) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(format!(
            "mlp {prefix} needs at least one layer"
        )));
    }
    for (l, pair) in dims.windows(2).enumerate() {
        store.insert_affine(&format!("{prefix}.{l}"), pair[0], pair[1], rng)?;
    }
    Ok(())
}

pub fn mlp_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    layers: usize,
    activation: Activation,
) -> Result<Var> {
    let mut h = x;
    for l in 0..layers {
        let w = g.param(&format!("{prefix}.{l}.w"))?;
        let b = g.param(&format!("{prefix}.{l}.b"))?;
        h = g.linear(h, w, Some(b))?;
        if l + 1 < layers || activation == Activation::Relu {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn register_layer_norm<T: Scalar>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(&[d], T::one()))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[d]))
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
}

pub fn register_attention<T: Scalar>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        store.insert_affine(&format!("{prefix}.{proj}"), d, d, rng)?;
    }
    Ok(())
}

/// Attention output and the per-head `T×T` weight matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product self-attention over the rows of `x: T×d`.
///
/// `mask`, when given, is a `T×T` additive bias on the attention logits
/// (use a large negative value to block a position).
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!(
            "attention expects T×d input, got {shape:?}"
        )));
    }
    let (t, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "feature width {d} is not divisible by {heads} heads"
        )));
    }
    if let Some(m) = mask {
        if m.shape() != [t, t] {
            return Err(Error::dim(format!(
                "attention mask {:?} does not match {t} tokens",
                m.shape()
            )));
        }
    }
    let proj = |g: &mut Graph<'_, T>, name: &str| -> Result<Var> {
        let w = g.param(&format!("{prefix}.{name}.w"))?;
        let b = g.param(&format!("{prefix}.{name}.b"))?;
        g.linear(x, w, Some(b))
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let dh = d / heads;
    let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mask = mask.map(|m| g.constant(m.clone()));
    let mut head_outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_last(q, h * dh, dh)?;
        let kh = g.slice_last(k, h * dh, dh)?;
        let vh = g.slice_last(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, inv_sqrt);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let a = g.softmax_last(scores);
        weights.push(a);
        head_outs.push(g.matmul(a, vh)?);
    }
    let joined = if heads == 1 {
        head_outs[0]
    } else {
        g.concat_last(&head_outs)?
    };
    let wo = g.param(&format!("{prefix}.o.w"))?;
    let bo = g.param(&format!("{prefix}.o.b"))?;
    let out = g.linear(joined, wo, Some(bo))?;
    Ok(AttentionOutput { out, weights })
}

pub fn register_encoder_layer<T: Scalar>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d: usize,
    ffn: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    register_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    register_attention(store, &format!("{prefix}.attn"), d, rng)?;
    register_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    register_mlp(store, &format!("{prefix}.ffn"), &[d, ffn, d], rng)
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, &format!("{prefix}.attn"), h, heads, None)?;
    let x = g.add(x, a.out)?;
    let h = layer_norm(g, &format!("{prefix}.ln2"), x)?;
    let f = mlp_forward(g, &format!("{prefix}.ffn"), h, 2, Activation::None)?;
    g.add(x, f)
}

/// Standard sinusoidal position table, `t × d`.
pub fn sinusoidal_encoding<T: Scalar>(t: usize, d: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(t * d);
    for pos in 0..t {
        for c in 0..d {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out.push(T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![t, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(entries: &[(&str, &[usize], &[f64])]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        for (name, shape, v) in entries {
            s.insert(name, Tensor::from_f64(shape, v).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn zero_weights_emit_bias() {
        let s = store_with(&[("m.0.w", &[3, 2], &[0.0; 6]), ("m.0.b", &[2], &[0.5, -1.5])]);
        let mut g = Graph::with_params(&s);
        let x = g.constant(
            Tensor::from_f64(&[4, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 1., 2., 3.]).unwrap(),
        );
        let y = mlp_forward(&mut g, "m", x, 1, Activation::None).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn relu_output_clamps() {
        let s = store_with(&[("m.0.w", &[1, 1], &[-1.0]), ("m.0.b", &[1], &[0.0])]);
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::from_f64(&[1], &[2.0]).unwrap());
        let y = mlp_forward(&mut g, "m", x, 1, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn two_layer_composition() {
        let s = store_with(&[
            ("m.0.w", &[1, 1], &[2.0]),
            ("m.0.b", &[1], &[0.0]),
            ("m.1.w", &[1, 1], &[3.0]),
            ("m.1.b", &[1], &[0.0]),
        ]);
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let y = mlp_forward(&mut g, "m", x, 2, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn missing_parameter_is_config_error() {
        let s = ParameterStore::<f64>::new();
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            mlp_forward(&mut g, "nope", x, 1, Activation::None),
            Err(Error::Config(_))
        ));
    }

    fn attention_store(d: usize) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        register_attention(&mut s, "a", d, &mut rng).unwrap();
        s
    }

    #[test]
    fn single_token_attends_to_itself() {
        let s = attention_store(4);
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::from_f64(&[1, 4], &[0.3, -0.2, 1.0, 0.5]).unwrap());
        let att = multi_head_attention(&mut g, "a", x, 2, None).unwrap();
        for w in &att.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // out = (x Wv + bv) Wo + bo
        let wv = s.value("a.v.w").unwrap();
        let wo = s.value("a.o.w").unwrap();
        let xv = g.value(x).clone();
        let expected = xv.matmul(wv).unwrap().matmul(wo).unwrap();
        assert!(g.value(att.out).max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let s = attention_store(4);
        let mut g = Graph::with_params(&s);
        let row = [0.3, -0.2, 1.0, 0.5];
        let x = g.constant(Tensor::from_rows(&[row, row, row]).unwrap());
        let att = multi_head_attention(&mut g, "a", x, 2, None).unwrap();
        for w in &att.weights {
            for v in g.value(*w).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let s = attention_store(4);
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            multi_head_attention(&mut g, "a", x, 3, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_blocks_positions() {
        let s = attention_store(4);
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::from_f64(&[2, 4], &[1., 2., 3., 4., -1., 0., 2., 1.]).unwrap());
        let mask = Tensor::from_f64(&[2, 2], &[0., -1e9, 0., 0.]).unwrap();
        let att = multi_head_attention(&mut g, "a", x, 1, Some(&mask)).unwrap();
        let w = g.value(att.weights[0]);
        assert_eq!(w.get(&[0, 0]), 1.0);
        assert_eq!(w.get(&[0, 1]), 0.0);
    }

    #[test]
    fn sinusoid_first_row() {
        let pe = sinusoidal_encoding::<f64>(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
    }
}
