use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// First and second Adam moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub adam: AdamState<T>,
}

/// Named trainable tensors plus optimizer state.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    global_step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            global_step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                adam: AdamState {
                    m: zeros.clone(),
                    v: zeros,
                },
            },
        );
        Ok(())
    }

    /// Inserts a complete entry, e.g. when restoring a checkpoint.
    pub fn insert_entry(&mut self, name: &str, entry: ParamEntry<T>) -> Result<()> {
        let shape = entry.value.shape();
        if entry.adam.m.shape() != shape || entry.adam.v.shape() != shape {
            return Err(Error::dim(format!(
                "optimizer state shape mismatch for {name}"
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    /// Xavier-uniform `din×dout` weight and zero `dout` bias.
    pub fn insert_affine(
        &mut self,
        prefix: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let limit = (6.0 / (din + dout) as f64).sqrt();
        let w: Vec<T> = (0..din * dout)
            .map(|_| T::lit(rng.random_range(-limit..limit)))
            .collect();
        self.insert(&format!("{prefix}.w"), Tensor::new(&[din, dout], w)?)?;
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[dout]))
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name} has shape {:?}, got {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn set_global_step(&mut self, step: u64) {
        self.global_step = step;
    }

    /// Zero gradient keyed like this store.
    pub fn zero_grads(&self) -> Grads<T> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), Tensor::zeros(e.value.shape())))
            .collect()
    }

    /// Converts values and moments to another precision.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            adam: AdamState {
                                m: e.adam.m.cast(),
                                v: e.adam.v.cast(),
                            },
                        },
                    )
                })
                .collect(),
            global_step: self.global_step,
        }
    }
}

/// Global L2 norm over a gradient map.
pub fn grad_norm<T: Scalar>(grads: &Grads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let c = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update over every parameter of `store`.
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &Grads<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.entries.len() {
        let extra: Vec<&String> = grads
            .keys()
            .filter(|k| !store.entries.contains_key(*k))
            .collect();
        let missing: Vec<&String> = store
            .entries
            .keys()
            .filter(|k| !grads.contains_key(*k))
            .collect();
        return Err(Error::config(format!(
            "gradient keys do not match parameters (missing {missing:?}, extra {extra:?})"
        )));
    }
    for (name, entry) in &store.entries {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::config(format!("missing gradient for {name}")))?;
        if g.shape() != entry.value.shape() {
            return Err(Error::dim(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                entry.value.shape()
            )));
        }
    }
    let t = store.global_step + 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let one = T::one();
    for (name, entry) in store.entries.iter_mut() {
        let g = grads[name].data();
        let m = entry.adam.m.data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (one - b1) * g;
        }
        let v = entry.adam.v.data_mut();
        for (v, &g) in v.iter_mut().zip(g) {
            *v = b2 * *v + (one - b2) * g * g;
        }
        let m = entry.adam.m.data();
        let v = entry.adam.v.data();
        let p = entry.value.data_mut();
        for ((p, &m), &v) in p.iter_mut().zip(m).zip(v) {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    store.global_step = t;
    Ok(())
}
