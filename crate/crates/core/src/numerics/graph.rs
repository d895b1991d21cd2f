//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are pushed, and [`Graph::backward`] walks the tape in reverse creation order.
//! Parameters are bound lazily from a [`ParameterStore`] so each named
//! parameter owns exactly one leaf per graph.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::optim::ParameterStore;
use crate::numerics::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, IndexTensor, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Concat0(Vec<Var>),
    Index0 {
        x: Var,
        index: usize,
    },
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    MaxAxis0 {
        x: Var,
        indices: Vec<usize>,
    },
    MeanAxis0(Var),
    SumLast(Var),
    Sqrt(Var),
    Square(Var),
    MeanAll(Var),
    Outer(Var),
    Bilinear {
        insight: Var,
        sim: Var,
        reverb: Var,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParameterStore<T>>,
    bound: BTreeMap<String, Var>,
}

/// Gradients for every node reached by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: BTreeMap::new(),
        }
    }

    pub fn with_params(store: &'p ParameterStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> Option<&'p ParameterStore<T>> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to the named parameter of the attached store. Repeated
    /// requests for the same name return the same leaf.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self.store.ok_or_else(|| {
            Error::config(format!("graph has no parameter store (wanted {name})"))
        })?;
        let value = store
            .value(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))?
            .clone();
        let v = self.input(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Affine map over the trailing axis: `x[…×din]·w[din×dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::dim(format!(
                "affine map: input {:?} does not match weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.outer_rows();
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::dim(format!(
                    "affine map: bias {:?} does not match weight {:?}",
                    bv.shape(),
                    wv.shape()
                )));
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        matmul_into(xv.data(), wv.data(), &mut out, rows, din, dout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if av.rank() == 0 || len == 0 || start + len > d {
            return Err(Error::dim(format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                av.shape()
            )));
        }
        let rows = av.outer_rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SliceLast { x: a, start },
            rg,
        ))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat needs at least one tensor"));
        };
        let lead = self.value(first).shape()[..self.value(first).rank().saturating_sub(1)].to_vec();
        let rows = self.value(first).outer_rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() == 0 || pv.shape()[..pv.rank() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat along last axis: {:?} vs {:?}",
                    self.value(first).shape(),
                    pv.shape()
                )));
            }
            total += pv.last_dim();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let d = pv.last_dim();
                out.extend_from_slice(&pv.data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatLast(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::concat0(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat0(parts.to_vec()), rg))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(p));
            lifted.push(self.reshape(p, &shape)?);
        }
        self.concat0(&lifted)
    }

    pub fn index0(&mut self, a: Var, index: usize) -> Result<Var> {
        let value = self.value(a).index0(index)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Index0 { x: a, index }, rg))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxLast(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim(format!(
                "layer norm over width {d} with gain {:?} and bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let n = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..d {
                out.push((row[c] - mean) * rstd * gv.data()[c] + bv.data()[c]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        ))
    }

    /// Elementwise maximum over axis 0 and the attaining index. Ties go to
    /// the smallest index, and the gradient flows to that index only.
    pub fn max_axis0(&mut self, a: Var) -> Result<(Var, IndexTensor)> {
        let av = self.value(a);
        if av.rank() == 0 || av.shape()[0] == 0 {
            return Err(Error::dim("max over an empty axis"));
        }
        let k = av.shape()[0];
        let inner = av.len() / k;
        let mut out = av.data()[..inner].to_vec();
        let mut idx = vec![0usize; inner];
        for m in 1..k {
            let slice = &av.data()[m * inner..(m + 1) * inner];
            for u in 0..inner {
                if slice[u] > out[u] {
                    out[u] = slice[u];
                    idx[u] = m;
                }
            }
        }
        let shape = av.shape()[1..].to_vec();
        let rg = self.rg(&[a]);
        let indices = IndexTensor {
            shape: shape.clone(),
            data: idx.clone(),
        };
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::MaxAxis0 { x: a, indices: idx },
            rg,
        );
        Ok((v, indices))
    }

    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(Error::dim("mean over axis 0 of a scalar"));
        }
        let k = av.shape()[0];
        let inner = av.len() / k;
        // shifted by the first slice so identical slices average exactly
        let first = &av.data()[..inner];
        let mut acc = vec![T::zero(); inner];
        for m in 1..k {
            for ((o, &v), &f) in acc
                .iter_mut()
                .zip(&av.data()[m * inner..(m + 1) * inner])
                .zip(first)
            {
                *o += v - f;
            }
        }
        let kk = T::from_usize(k).unwrap();
        let out: Vec<T> = first.iter().zip(&acc).map(|(&f, &a)| f + a / kk).collect();
        let shape = av.shape()[1..].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis0(a), rg))
    }

    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let out: Vec<T> = av
            .data()
            .chunks(d)
            .map(|r| r.iter().copied().sum())
            .collect();
        let shape = av.shape()[..av.rank().saturating_sub(1)].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::SumLast(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.sqrt());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::from_usize(av.len()).unwrap();
        let value = Tensor::scalar(av.sum() / n);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Per-column outer products: `f[t×d] → F[t×t×d]`, `F[:,:,n] = f[:,n] f[:,n]ᵀ`.
    pub fn outer_columns(&mut self, f: Var) -> Result<Var> {
        let fv = self.value(f);
        if fv.rank() != 2 {
            return Err(Error::dim(format!(
                "outer products need a t×d matrix, got {:?}",
                fv.shape()
            )));
        }
        let (t, d) = (fv.shape()[0], fv.shape()[1]);
        let x = fv.data();
        let mut out = vec![T::zero(); t * t * d];
        for s in 0..t {
            for u in 0..t {
                let base = (s * t + u) * d;
                for n in 0..d {
                    out[base + n] = x[s * d + n] * x[u * d + n];
                }
            }
        }
        let rg = self.rg(&[f]);
        Ok(self.push(Tensor::from_parts(vec![t, t, d], out), Op::Outer(f), rg))
    }

    /// `out[:,:,n] = insightᵀ · sim[:,:,n] · reverb` for every feature slice.
    pub fn bilinear(&mut self, insight: Var, sim: Var, reverb: Var) -> Result<Var> {
        let (iv, sv, rv) = (self.value(insight), self.value(sim), self.value(reverb));
        let ok = iv.rank() == 2
            && sv.rank() == 3
            && rv.rank() == 2
            && sv.shape()[0] == sv.shape()[1]
            && iv.shape()[0] == sv.shape()[0]
            && rv.shape()[0] == sv.shape()[0];
        if !ok {
            return Err(Error::dim(format!(
                "bilinear transform: insight {:?}, similarity {:?}, reverberation {:?}",
                iv.shape(),
                sv.shape(),
                rv.shape()
            )));
        }
        let (ta, ki, tb, d) = (iv.shape()[0], iv.shape()[1], rv.shape()[1], sv.shape()[2]);
        let (ivd, svd, rvd) = (iv.data(), sv.data(), rv.data());
        let mut out = vec![T::zero(); ki * tb * d];
        // P[s,b,n] = Σ_t S[s,t,n] R[t,b]
        let mut p = vec![T::zero(); ta * tb * d];
        for s in 0..ta {
            for t in 0..ta {
                let srow = &svd[(s * ta + t) * d..(s * ta + t + 1) * d];
                for b in 0..tb {
                    let r = rvd[t * tb + b];
                    let prow = &mut p[(s * tb + b) * d..(s * tb + b + 1) * d];
                    for (pv, &sv) in prow.iter_mut().zip(srow) {
                        *pv += sv * r;
                    }
                }
            }
        }
        for k in 0..ki {
            for s in 0..ta {
                let ik = ivd[s * ki + k];
                for b in 0..tb {
                    let prow = &p[(s * tb + b) * d..(s * tb + b + 1) * d];
                    let orow = &mut out[(k * tb + b) * d..(k * tb + b + 1) * d];
                    for (o, &pv) in orow.iter_mut().zip(prow) {
                        *o += ik * pv;
                    }
                }
            }
        }
        let rg = self.rg(&[insight, sim, reverb]);
        Ok(self.push(
            Tensor::from_parts(vec![ki, tb, d], out),
            Op::Bilinear {
                insight,
                sim,
                reverb,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |o| add_into(o, gd));
                self.acc(grads, *b, |o| add_into(o, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |o| add_into(o, gd));
                self.acc(grads, *b, |o| {
                    for (o, &v) in o.iter_mut().zip(gd) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |o| {
                    for ((o, &gv), &y) in o.iter_mut().zip(gd).zip(bv) {
                        *o += gv * y;
                    }
                });
                self.acc(grads, *b, |o| {
                    for ((o, &gv), &x) in o.iter_mut().zip(gd).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |o| {
                    for (o, &gv) in o.iter_mut().zip(gd) {
                        *o += gv * *c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc(grads, *a, |o| matmul_nt_into(gd, bv.data(), o, m, k, n));
                self.acc(grads, *b, |o| matmul_tn_into(av.data(), gd, o, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.outer_rows();
                self.acc(grads, *x, |o| {
                    matmul_nt_into(gd, wv.data(), o, rows, din, dout)
                });
                self.acc(grads, *w, |o| {
                    matmul_tn_into(xv.data(), gd, o, rows, din, dout)
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |o| {
                        for row in gd.chunks(dout) {
                            add_into(o, row);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |o| {
                    for ((o, &gv), &x) in o.iter_mut().zip(gd).zip(av) {
                        if x > T::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = g.transpose().expect("transpose gradient of a matrix");
                self.acc(grads, *a, |o| add_into(o, gt.data()));
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |o| add_into(o, gd));
            }
            Op::SliceLast { x, start } => {
                let d = self.value(*x).last_dim();
                let len = g.last_dim();
                self.acc(grads, *x, |o| {
                    for (r, grow) in gd.chunks(len).enumerate() {
                        add_into(&mut o[r * d + start..r * d + start + len], grow);
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let mut col = 0;
                for &p in parts {
                    let d = self.value(p).last_dim();
                    self.acc(grads, p, |o| {
                        for (r, orow) in o.chunks_mut(d).enumerate() {
                            add_into(orow, &gd[r * total + col..r * total + col + d]);
                        }
                    });
                    col += d;
                }
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |o| add_into(o, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::Index0 { x, index } => {
                let n = g.len();
                self.acc(grads, *x, |o| {
                    add_into(&mut o[index * n..(index + 1) * n], gd)
                });
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                self.acc(grads, *a, |o| {
                    for ((orow, grow), yrow) in o.chunks_mut(d).zip(gd.chunks(d)).zip(y.chunks(d)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let d = xv.last_dim();
                let n = T::from_usize(d).unwrap();
                let rows = xv.outer_rows();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let rstd = T::one() / (var + *eps).sqrt();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * rstd;
                        dxhat[c] = grow[c] * gam[c];
                        dgamma[c] += grow[c] * xhat[c];
                        dbeta[c] += grow[c];
                        m1 += dxhat[c];
                        m2 += dxhat[c] * xhat[c];
                    }
                    m1 /= n;
                    m2 /= n;
                    for c in 0..d {
                        dx[r * d + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                self.acc(grads, *x, |o| add_into(o, &dx));
                self.acc(grads, *gamma, |o| add_into(o, &dgamma));
                self.acc(grads, *beta, |o| add_into(o, &dbeta));
            }
            Op::MaxAxis0 { x, indices } => {
                let inner = indices.len();
                self.acc(grads, *x, |o| {
                    for (u, (&k, &gv)) in indices.iter().zip(gd).enumerate() {
                        o[k * inner + u] += gv;
                    }
                });
            }
            Op::MeanAxis0(a) => {
                let av = self.value(*a);
                let k = av.shape()[0];
                let kk = T::from_usize(k).unwrap();
                self.acc(grads, *a, |o| {
                    for chunk in o.chunks_mut(gd.len()) {
                        for (o, &gv) in chunk.iter_mut().zip(gd) {
                            *o += gv / kk;
                        }
                    }
                });
            }
            Op::SumLast(a) => {
                let d = self.value(*a).last_dim();
                self.acc(grads, *a, |o| {
                    for (orow, &gv) in o.chunks_mut(d).zip(gd) {
                        for o in orow.iter_mut() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let half = T::lit(0.5);
                self.acc(grads, *a, |o| {
                    for ((o, &gv), &yv) in o.iter_mut().zip(gd).zip(y) {
                        // subgradient 0 at the origin
                        if yv > T::zero() {
                            *o += gv * half / yv;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                let two = T::lit(2.0);
                self.acc(grads, *a, |o| {
                    for ((o, &gv), &x) in o.iter_mut().zip(gd).zip(av) {
                        *o += two * x * gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let share = gd[0] / T::from_usize(n).unwrap();
                self.acc(grads, *a, |o| {
                    for o in o.iter_mut() {
                        *o += share;
                    }
                });
            }
            Op::Outer(f) => {
                let fv = self.value(*f);
                let (t, d) = (fv.shape()[0], fv.shape()[1]);
                let x = fv.data();
                self.acc(grads, *f, |o| {
                    for s in 0..t {
                        for u in 0..t {
                            let base = (s * t + u) * d;
                            for n in 0..d {
                                let gv = gd[base + n];
                                o[s * d + n] += gv * x[u * d + n];
                                o[u * d + n] += gv * x[s * d + n];
                            }
                        }
                    }
                });
            }
            Op::Bilinear {
                insight,
                sim,
                reverb,
            } => self.backprop_bilinear(*insight, *sim, *reverb, gd, grads),
        }
    }

    fn backprop_bilinear(
        &self,
        insight: Var,
        sim: Var,
        reverb: Var,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (iv, sv, rv) = (self.value(insight), self.value(sim), self.value(reverb));
        let (ta, ki, tb, d) = (iv.shape()[0], iv.shape()[1], rv.shape()[1], sv.shape()[2]);
        let (ivd, svd, rvd) = (iv.data(), sv.data(), rv.data());
        // P[s,b,n] = Σ_t S[s,t,n] R[t,b]; out[k,b,n] = Σ_s I[s,k] P[s,b,n]
        let mut p = vec![T::zero(); ta * tb * d];
        for s in 0..ta {
            for t in 0..ta {
                for b in 0..tb {
                    let r = rvd[t * tb + b];
                    for n in 0..d {
                        p[(s * tb + b) * d + n] += svd[(s * ta + t) * d + n] * r;
                    }
                }
            }
        }
        // gP[s,b,n] = Σ_k I[s,k] g[k,b,n]
        let mut gp = vec![T::zero(); ta * tb * d];
        for s in 0..ta {
            for k in 0..ki {
                let ik = ivd[s * ki + k];
                for b in 0..tb {
                    for n in 0..d {
                        gp[(s * tb + b) * d + n] += ik * gd[(k * tb + b) * d + n];
                    }
                }
            }
        }
        self.acc(grads, insight, |o| {
            for s in 0..ta {
                for k in 0..ki {
                    let mut acc = T::zero();
                    for b in 0..tb {
                        for n in 0..d {
                            acc += gd[(k * tb + b) * d + n] * p[(s * tb + b) * d + n];
                        }
                    }
                    o[s * ki + k] += acc;
                }
            }
        });
        self.acc(grads, sim, |o| {
            for s in 0..ta {
                for t in 0..ta {
                    for b in 0..tb {
                        let r = rvd[t * tb + b];
                        for n in 0..d {
                            o[(s * ta + t) * d + n] += gp[(s * tb + b) * d + n] * r;
                        }
                    }
                }
            }
        });
        self.acc(grads, reverb, |o| {
            for t in 0..ta {
                for b in 0..tb {
                    let mut acc = T::zero();
                    for s in 0..ta {
                        for n in 0..d {
                            acc += svd[(s * ta + t) * d + n] * gp[(s * tb + b) * d + n];
                        }
                    }
                    o[t * tb + b] += acc;
                }
            }
        });
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    /// Gradients of every bound parameter; unbound or unreached parameters of
    /// the store get zeros so the result is keyed exactly like the store.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        if let Some(store) = self.store {
            for (name, value) in store.iter() {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                out.insert(name.to_string(), g);
            }
        }
        out
    }
}

fn add_into<T: Scalar>(o: &mut [T], g: &[T]) {
    for (o, &v) in o.iter_mut().zip(g) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn max_axis0_ties_and_indices() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3, 1], &[3., 1., 2.]));
        let (m, idx) = g.max_axis0(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.]);
        assert_eq!(idx.data, vec![0]);

        let y = g.input(t(&[2, 1], &[5., 5.]));
        let (m, idx) = g.max_axis0(y).unwrap();
        assert_eq!(g.value(m).data(), &[5.]);
        assert_eq!(idx.data, vec![0]);

        let z = g.input(t(&[1, 2], &[4., -1.]));
        let (m, idx) = g.max_axis0(z).unwrap();
        assert_eq!(g.value(m).data(), &[4., -1.]);
        assert_eq!(idx.data, vec![0, 0]);
    }

    #[test]
    fn max_gradient_goes_to_attaining_index_only() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2], &[1., 7., 1., 3.]));
        let (m, _) = g.max_axis0(x).unwrap();
        let s = g.sum_last(m);
        let s = g.reshape(s, &[]).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 0., 0.]);
    }

    #[test]
    fn outer_columns_slice() {
        let mut g = Graph::<f64>::new();
        let f = g.input(t(&[2, 1], &[1., 2.]));
        let s = g.outer_columns(f).unwrap();
        assert_eq!(g.value(s).data(), &[1., 2., 2., 4.]);
    }

    #[test]
    fn bilinear_selects_top_left() {
        let mut g = Graph::<f64>::new();
        let i = g.input(t(&[2, 1], &[1., 0.]));
        let r = g.input(t(&[2, 1], &[1., 0.]));
        let s = g.input(t(&[2, 2, 1], &[7., 2., 3., 4.]));
        let out = g.bilinear(i, s, r).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 1]);
        assert_eq!(g.value(out).data(), &[7.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1., 2.]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3], &[0.1, -2.0, 3.0, 100.0, 100.0, 100.0]));
        let s = g.softmax_last(x);
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
