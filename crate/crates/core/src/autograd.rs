//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and whatever it needs for the backward pass. Parameters are read from
//! a [`ParamStore`] by name, and [`Gradients::params`] hands gradients back keyed
//! by the same names.

use std::collections::{BTreeMap, HashMap};

use crate::params::ParamStore;
use crate::tensor::{broadcast_index_map, broadcast_shape, gemm, reduce_to, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Bilinear taps of one RoI bin: up to four `(flat spatial index, weight)` pairs.
type Taps = [(usize, f64); 4];

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    MeanTrailing { input: Var, block: usize },
    SumAll(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cols: Vec<f64> },
    GroupNorm { x: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    RoiAlign { map: Var, taps: Vec<Taps> },
    Cosine { a: Var, b: Var, eps: f64 },
    SoftmaxCe { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    SmoothL1 { pred: Var, target: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    params: HashMap<String, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only inputs and variables.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, params: HashMap::new() }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self { nodes: Vec::new(), store: Some(store), params: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named parameter from the bound store. Repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.variable(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape()).unwrap_or_else(|| {
                panic!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape())
            });
            let ma = broadcast_index_map(va.shape(), &shape);
            let mb = broadcast_index_map(vb.shape(), &shape);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(va.data()[i], vb.data()[j])).collect();
            Tensor::new(&shape, data)
        };
        let grad = self.needs(a) || self.needs(b);
        self.push(value, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Sum of equally shaped values.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut value = self.value(vars[0]).clone();
        for &v in &vars[1..] {
            value.add_assign(self.value(v));
        }
        let grad = vars.iter().any(|&v| self.needs(v));
        self.push(value, Op::AddN(vars.to_vec()), grad)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let grad = self.needs(a);
        self.push(value, Op::Scale(a, s), grad)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let grad = self.needs(a);
        self.push(value, Op::AddScalar(a), grad)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let grad = self.needs(a);
        self.push(value, Op::Relu(a), grad)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let grad = self.needs(a);
        self.push(value, Op::Sigmoid(a), grad)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let grad = self.needs(a);
        self.push(value, Op::Tanh(a), grad)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0), "matmul {:?} x {:?}", va.shape(), vb.shape());
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), 0.0, &mut out);
        let grad = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), grad)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.rank(), 2);
        let value = transpose2d(va);
        let grad = self.needs(a);
        self.push(value, Op::Transpose(a), grad)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let grad = self.needs(a);
        self.push(value, Op::Reshape(a), grad)
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty());
        let first = self.value(vars[0]).shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            assert!(s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..], "concat shape mismatch {s:?} vs {first:?}");
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let t = self.value(v);
                let chunk = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let grad = vars.iter().any(|&v| self.needs(v));
        self.push(Tensor::new(&shape, data), Op::Concat { inputs: vars.to_vec(), axis }, grad)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let shape = t.shape();
        assert!(start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let grad = self.needs(a);
        self.push(Tensor::new(&out_shape, data), Op::Slice { input: a, axis, start }, grad)
    }

    /// Mean over the last `n` axes.
    pub fn mean_trailing(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        let rank = t.rank();
        assert!(n <= rank);
        let block: usize = t.shape()[rank - n..].iter().product();
        let out_shape = t.shape()[..rank - n].to_vec();
        let data = t.data().chunks(block).map(|c| c.iter().sum::<f64>() / block as f64).collect();
        let grad = self.needs(a);
        self.push(Tensor::new(&out_shape, data), Op::MeanTrailing { input: a, block }, grad)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let grad = self.needs(a);
        self.push(value, Op::SumAll(a), grad)
    }

    /// 2-D convolution of one `[C,H,W]` image with `[O,C,k,k]` weights (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.rank(), 3, "conv2d input must be [C,H,W], got {:?}", vx.shape());
        assert_eq!(vw.rank(), 4);
        let (c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (o, k) = (vw.dim(0), vw.dim(2));
        assert_eq!(vw.dim(1), c, "conv2d channel mismatch: input {:?}, weight {:?}", vx.shape(), vw.shape());
        let geo = ConvGeometry::new(c, h, wd, k, stride, pad);
        let cols = geo.im2col(vx.data());
        let mut out = vec![0.0; o * geo.hw_out()];
        let ckk = geo.ckk();
        gemm(o, ckk, geo.hw_out(), vw.data(), (ckk, 1), &cols, (geo.hw_out(), 1), 0.0, &mut out);
        let grad = self.needs(x) || self.needs(w);
        let value = Tensor::new(&[o, geo.ho, geo.wo], out);
        let cols = if self.needs(w) { cols } else { Vec::new() };
        self.push(value, Op::Conv2d { x, w, stride, pad, cols }, grad)
    }

    /// Group normalization of a `[C,H,W]` map, without affine terms.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 3);
        let c = t.dim(0);
        assert!(c.is_multiple_of(groups), "{c} channels not divisible into {groups} groups");
        let n = t.len() / groups;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for (g, chunk) in t.data().chunks(n).enumerate() {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat[g * n..(g + 1) * n].iter_mut().zip(chunk) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(t.shape(), xhat.clone());
        let grad = self.needs(x);
        self.push(value, Op::GroupNorm { x, groups, xhat, inv_std }, grad)
    }

    /// Bilinear RoI pooling of `map: [C,H,W]` over boxes in feature coordinates.
    ///
    /// Each region is `(x1, y1, x2, y2)` already divided by the stride; bin
    /// centres are sampled once with the half-cell offset, giving `[K,C,P,P]`.
    pub fn roi_align(&mut self, map: Var, regions: &[[f64; 4]], pooled: usize) -> Var {
        let t = self.value(map);
        assert_eq!(t.rank(), 3);
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let bins = pooled * pooled;
        let mut taps = Vec::with_capacity(regions.len() * bins);
        for r in regions {
            let bin_w = (r[2] - r[0]) / pooled as f64;
            let bin_h = (r[3] - r[1]) / pooled as f64;
            for py in 0..pooled {
                let y = r[1] + (py as f64 + 0.5) * bin_h - 0.5;
                for px in 0..pooled {
                    let x = r[0] + (px as f64 + 0.5) * bin_w - 0.5;
                    taps.push(bilinear_taps(y, x, h, w));
                }
            }
        }
        let mut out = vec![0.0; regions.len() * c * bins];
        let plane = h * w;
        for k in 0..regions.len() {
            let kt = &taps[k * bins..(k + 1) * bins];
            for ch in 0..c {
                let src = &t.data()[ch * plane..(ch + 1) * plane];
                let dst = &mut out[(k * c + ch) * bins..(k * c + ch + 1) * bins];
                for (o, tp) in dst.iter_mut().zip(kt) {
                    *o = tp.iter().map(|&(i, wt)| wt * src[i]).sum();
                }
            }
        }
        let grad = self.needs(map);
        self.push(Tensor::new(&[regions.len(), c, pooled, pooled], out), Op::RoiAlign { map, taps }, grad)
    }

    /// Row-wise cosine similarity of two `[K,C]` values: `<a,b> / (|a||b| + eps)`, shape `[K,1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        assert_eq!(va.rank(), 2);
        let cols = va.dim(1);
        let data: Vec<f64> = va
            .data()
            .chunks(cols)
            .zip(vb.data().chunks(cols))
            .map(|(x, y)| {
                let (dot, na, nb) = dot_norms(x, y);
                dot / (na * nb + eps)
            })
            .collect();
        let k = data.len();
        let grad = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[k, 1], data), Op::Cosine { a, b, eps }, grad)
    }

    /// `sum_k w_k * CE(softmax(logits_k), labels_k)` for `[K,L]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rank(), 2);
        assert_eq!(t.dim(0), labels.len());
        assert_eq!(labels.len(), weights.len());
        let probs = crate::tensor::softmax_rows(t);
        let cols = t.dim(1);
        let mut loss = 0.0;
        for (k, row) in t.data().chunks(cols).enumerate() {
            if weights[k] == 0.0 {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[k] * (lse - row[labels[k]]);
        }
        let grad = self.needs(logits);
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs: probs.into_data() };
        self.push(Tensor::scalar(loss), op, grad)
    }

    /// `sum_i w_i * BCE(sigmoid(x_i), t_i)` over every element of `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.len(), targets.len());
        assert_eq!(t.len(), weights.len());
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&x, &y), &w)| w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()))
            .sum();
        let grad = self.needs(logits);
        let op = Op::BceLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() };
        self.push(Tensor::scalar(loss), op, grad)
    }

    /// `sum_k w_k * sum_j smooth_l1(pred[k,j] - target[k,j])` with unit transition point.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "smooth_l1 shape mismatch");
        let rows = weights.len();
        assert!(rows > 0 && p.len().is_multiple_of(rows) || p.is_empty());
        let cols = if rows == 0 { 0 } else { p.len() / rows };
        let mut loss = 0.0;
        for k in 0..rows {
            if weights[k] == 0.0 {
                continue;
            }
            let s: f64 = (0..cols).map(|j| smooth_l1(p.data()[k * cols + j] - target.data()[k * cols + j])).sum();
            loss += weights[k] * s;
        }
        let grad = self.needs(pred);
        let op = Op::SmoothL1 { pred, target: target.data().to_vec(), weights: weights.to_vec() };
        self.push(Tensor::scalar(loss), op, grad)
    }

    /// Backpropagate from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(n, &v)| (n.clone(), v)).collect();
        Gradients { grads, params }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, reduce_to(&g.map(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, reduce_to(&bmul(g, vb), va.shape()));
                }
                if self.needs(*b) {
                    acc(*b, reduce_to(&bmul(g, va), vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let inv_b = vb.map(|v| 1.0 / v);
                if self.needs(*a) {
                    acc(*a, reduce_to(&bmul(g, &inv_b), va.shape()));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -out / b
                    let t = bmul(&bmul(g, &node.value), &inv_b).map(|v| -v);
                    acc(*b, reduce_to(&t, vb.shape()));
                }
            }
            Op::AddN(vars) => {
                for &v in vars {
                    acc(v, g.clone());
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gv, t| gv * (1.0 - t * t))),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), 0.0, &mut da);
                    acc(*a, Tensor::new(&[m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), 0.0, &mut db);
                    acc(*b, Tensor::new(&[k, n], db));
                }
            }
            Op::Transpose(a) => acc(*a, transpose2d(g)),
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a))),
            Op::Concat { inputs, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * shape[*axis] + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        acc(v, Tensor::new(self.shape(v), data));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let src = self.shape(*input);
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut t = Tensor::zeros(src);
                for o in 0..outer {
                    let dst = (o * src[*axis] + start) * inner;
                    let s = o * len * inner;
                    t.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[s..s + len * inner]);
                }
                acc(*input, t);
            }
            Op::MeanTrailing { input, block } => {
                let inv = 1.0 / *block as f64;
                let mut t = Tensor::zeros(self.shape(*input));
                for (chunk, gv) in t.data_mut().chunks_mut(*block).zip(g.data()) {
                    chunk.fill(gv * inv);
                }
                acc(*input, t);
            }
            Op::SumAll(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Conv2d { x, w, stride, pad, cols } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let geo = ConvGeometry::new(vx.dim(0), vx.dim(1), vx.dim(2), vw.dim(2), *stride, *pad);
                let (o, ckk, hw) = (vw.dim(0), geo.ckk(), geo.hw_out());
                if self.needs(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, hw, ckk, g.data(), (hw, 1), cols, (1, hw), 0.0, &mut dw);
                    acc(*w, Tensor::new(vw.shape(), dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, o, hw, vw.data(), (1, ckk), g.data(), (hw, 1), 0.0, &mut dcols);
                    acc(*x, Tensor::new(vx.shape(), geo.col2im(&dcols)));
                }
            }
            Op::GroupNorm { x, groups, xhat, inv_std } => {
                let n = xhat.len() / groups;
                let mut dx = vec![0.0; xhat.len()];
                for gi in 0..*groups {
                    let r = gi * n..(gi + 1) * n;
                    let (gs, xs) = (&g.data()[r.clone()], &xhat[r.clone()]);
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    let k = inv_std[gi] / n as f64;
                    for ((d, &gv), &xv) in dx[r].iter_mut().zip(gs).zip(xs) {
                        *d = k * (n as f64 * gv - sum_g - xv * sum_gx);
                    }
                }
                acc(*x, Tensor::new(self.shape(*x), dx));
            }
            Op::RoiAlign { map, taps } => {
                let src = self.shape(*map);
                let (c, plane) = (src[0], src[1] * src[2]);
                let k_count = g.dim(0);
                let bins = g.dim(2) * g.dim(3);
                let mut t = Tensor::zeros(src);
                let data = t.data_mut();
                for k in 0..k_count {
                    let kt = &taps[k * bins..(k + 1) * bins];
                    for ch in 0..c {
                        let gsrc = &g.data()[(k * c + ch) * bins..(k * c + ch + 1) * bins];
                        let dst = &mut data[ch * plane..(ch + 1) * plane];
                        for (gv, tp) in gsrc.iter().zip(kt) {
                            for &(i, wt) in tp {
                                dst[i] += wt * gv;
                            }
                        }
                    }
                }
                acc(*map, t);
            }
            Op::Cosine { a, b, eps } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.dim(1);
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for (k, gv) in g.data().iter().enumerate() {
                    let r = k * cols..(k + 1) * cols;
                    let (x, y) = (&va.data()[r.clone()], &vb.data()[r.clone()]);
                    let (dot, na, nb) = dot_norms(x, y);
                    let den = na * nb + eps;
                    for j in 0..cols {
                        let ta = if na > 0.0 { dot * nb * x[j] / (na * den * den) } else { 0.0 };
                        let tb = if nb > 0.0 { dot * na * y[j] / (nb * den * den) } else { 0.0 };
                        da[k * cols + j] = gv * (y[j] / den - ta);
                        db[k * cols + j] = gv * (x[j] / den - tb);
                    }
                }
                acc(*a, Tensor::new(va.shape(), da));
                acc(*b, Tensor::new(vb.shape(), db));
            }
            Op::SoftmaxCe { logits, labels, weights, probs } => {
                let gv = g.item();
                let cols = self.shape(*logits)[1];
                let mut d = probs.clone();
                for (k, row) in d.chunks_mut(cols).enumerate() {
                    let w = weights[k] * gv;
                    row[labels[k]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                acc(*logits, Tensor::new(self.shape(*logits), d));
            }
            Op::BceLogits { logits, targets, weights } => {
                let gv = g.item();
                let x = self.value(*logits);
                let d = x
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&x, &y), &w)| gv * w * (sigmoid(x) - y))
                    .collect();
                acc(*logits, Tensor::new(x.shape(), d));
            }
            Op::SmoothL1 { pred, target, weights } => {
                let gv = g.item();
                let p = self.value(*pred);
                let cols = if weights.is_empty() { 0 } else { p.len() / weights.len() };
                let d = p
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&a, &b))| gv * weights[i / cols] * smooth_l1_grad(a - b))
                    .collect();
                acc(*pred, Tensor::new(p.shape(), d));
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of a node; `None` if it did not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter the graph touched, zero-filled where unused.
    pub fn params(&self, graph: &Graph<'_>) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let t = self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
                (name.clone(), t)
            })
            .collect()
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

/// Elementwise product of `a` with `b` broadcast into `a`'s shape.
fn bmul(a: &Tensor, b: &Tensor) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| x * y);
    }
    let shape = broadcast_shape(a.shape(), b.shape()).expect("broadcast");
    let ma = broadcast_index_map(a.shape(), &shape);
    let mb = broadcast_index_map(b.shape(), &shape);
    Tensor::new(&shape, ma.iter().zip(&mb).map(|(&i, &j)| a.data()[i] * b.data()[j]).collect())
}

fn transpose2d(t: &Tensor) -> Tensor {
    let (r, c) = (t.dim(0), t.dim(1));
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

/// Bilinear interpolation taps at `(y, x)` on an `h x w` grid.
///
/// Points further than one cell outside the grid read zero; points within that
/// margin are clamped to the border.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Taps {
    let empty = [(0, 0.0); 4];
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return empty;
    }
    let (y0, y1, ly) = axis_taps(y, h);
    let (x0, x1, lx) = axis_taps(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

fn axis_taps(v: f64, n: usize) -> (usize, usize, f64) {
    let v = v.max(0.0);
    let lo = v.floor() as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { c, h, w, k, stride, pad, ho, wo }
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(row, col, src_index)` for every in-bounds im2col entry.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let hw = self.hw_out();
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (ch * self.h + iy as usize) * self.w + ix as usize;
                            f(row * hw, oy * self.wo + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.ckk() * self.hw_out()];
        self.for_each(|row, col, src| cols[row + col] = x[src]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.c * self.h * self.w];
        self.for_each(|row, col, src| x[src] += cols[row + col]);
        x
    }
}
