//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward pass builds a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] simply walks it in reverse.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{mm_nn, mm_nt, mm_tn, numel, transpose_batched, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Transpose {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Gelu {
        a: Var,
    },
    /// Per row: `1 / max(rms, eps)` and whether the rms term was active.
    RmsNorm {
        a: Var,
        inv_rms: Vec<(f64, bool)>,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MaskedSelect {
        a: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Right-aligned broadcast of `small` onto `big`: every axis of `small` is
/// either equal to the matching axis of `big` or 1.
fn broadcast_index(big: &[usize], small: &[usize]) -> Option<Vec<usize>> {
    if small.len() > big.len() {
        return None;
    }
    let off = big.len() - small.len();
    for (i, &d) in small.iter().enumerate() {
        if d != 1 && d != big[off + i] {
            return None;
        }
    }
    let n = numel(big);
    if small == &big[off..] {
        let m = numel(small);
        return Some((0..n).map(|i| i % m).collect());
    }
    let mut sstride = vec![0usize; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        if small[i] != 1 {
            sstride[off + i] = acc;
        }
        acc *= small[i];
    }
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    for _ in 0..n {
        out.push(idx.iter().zip(&sstride).map(|(a, b)| a * b).sum());
        for ax in (0..big.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < big[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source index into the input for each output element of a permutation.
fn permute_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(shape);
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        src.push(idx.iter().zip(&src_strides).map(|(a, b)| a * b).sum());
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, src)
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn batch_dims(shape: &[usize]) -> usize {
    numel(&shape[..shape.len() - 2])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [.., m, k]` with `b: [.., k, n]` (identical batch axes) or
    /// `b: [k, n]` shared across every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != k2 || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = batch_dims(&sa);
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            if shared_b {
                mm_nn(ad, bd, &mut out, batch * m, k, n);
            } else {
                for t in 0..batch {
                    mm_nn(
                        &ad[t * m * k..(t + 1) * m * k],
                        &bd[t * k * n..(t + 1) * k * n],
                        &mut out[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b]))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let idx = broadcast_index(sa, sb).ok_or_else(|| shape_err(op_name, sa, sb))?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let data = ad.iter().zip(&idx).map(|(&x, &j)| f(x, bd[j])).collect();
        Ok(Tensor::from_parts(sa.to_vec(), data))
    }

    /// Elementwise `a + b`; `b` may broadcast onto `a` (right-aligned, size-1 axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale { a, c }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(shape_err("permute", &shape, axes));
        }
        let (out_shape, src) = permute_index(&shape, axes);
        let d = self.value(a).data();
        let data = src.iter().map(|&i| d[i]).collect();
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            t,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax { a, axis }, &[a]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * std_normal_cdf(x));
        self.push(t, Op::Gelu { a }, &[a])
    }

    /// `x / max(rms(x), eps)` along the last axis, without gain.
    pub fn rms_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err("rms_normalize", &shape, &[]))?;
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        let mut inv_rms = Vec::with_capacity(x.len() / d);
        for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
            let rms = (xr.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
            let r = 1.0 / rms.max(eps);
            for (yo, xi) in yr.iter_mut().zip(xr) {
                *yo = xi * r;
            }
            inv_rms.push((r, rms > eps));
        }
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::RmsNorm { a, inv_rms },
            &[a],
        ))
    }

    /// Cosine similarity between matching rows (last axis) of `a` and `b`.
    /// The output drops the last axis.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) || sa.is_empty() {
            return Err(shape_err("cosine", &sa, self.shape(b)));
        }
        let d = sa[sa.len() - 1];
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = x
            .chunks_exact(d)
            .zip(y.chunks_exact(d))
            .map(|(u, v)| {
                let (dot, nu, nv) = cosine_parts(u, v);
                dot / (nu * nv).sqrt().max(eps)
            })
            .collect();
        let shape = if sa.len() == 1 {
            vec![]
        } else {
            sa[..sa.len() - 1].to_vec()
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Cosine { a, b, eps },
            &[a, b],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Flattened elements of `a` where `mask` is set, in row-major order.
    pub fn masked_select(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if mask.len() != numel(&shape) {
            return Err(shape_err("masked_select", &shape, &[mask.len()]));
        }
        let index: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        if index.is_empty() {
            return Err(Error::Empty {
                what: "masked selection".into(),
            });
        }
        let d = self.value(a).data();
        let data: Vec<f64> = index.iter().map(|&i| d[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::MaskedSelect { a, index }, &[a]))
    }

    /// Back-propagates from a scalar root. Gradients accumulate on
    /// `requires_grad` leaves across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                if node.requires_grad {
                    match &mut node.grad {
                        Some(acc) => {
                            for (x, y) in acc.data_mut().iter_mut().zip(&g) {
                                *x += y;
                            }
                        }
                        None => {
                            node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                        }
                    }
                }
                continue;
            }
            for (input, contrib) in self.vjp(id, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (x, y) in acc.iter_mut().zip(&contrib) {
                            *x += y;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = batch_dims(sa);
                let mut ga = vec![0.0; val(*a).len()];
                let mut gb = vec![0.0; val(*b).len()];
                if sb.len() == 2 {
                    mm_nt(g, val(*b), &mut ga, batch * m, n, k);
                    mm_tn(val(*a), g, &mut gb, batch * m, k, n);
                } else {
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        mm_nt(
                            gs,
                            &val(*b)[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        mm_tn(
                            &val(*a)[t * m * k..(t + 1) * m * k],
                            gs,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let idx = broadcast_index(shp(*a), shp(*b)).expect("checked in forward");
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                let mut gb = vec![0.0; val(*b).len()];
                for (gi, &j) in g.iter().zip(&idx) {
                    gb[j] += sign * gi;
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul { a, b } => {
                let idx = broadcast_index(shp(*a), shp(*b)).expect("checked in forward");
                let (ad, bd) = (val(*a), val(*b));
                let ga = g.iter().zip(&idx).map(|(gi, &j)| gi * bd[j]).collect();
                let mut gb = vec![0.0; bd.len()];
                for ((gi, &j), x) in g.iter().zip(&idx).zip(ad) {
                    gb[j] += gi * x;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { a, c } => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Transpose { a } => {
                let s = node.value.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = vec![0.0; g.len()];
                transpose_batched(g, &mut ga, m, n);
                vec![(*a, ga)]
            }
            Op::Permute { a, axes } => {
                let (_, src) = permute_index(shp(*a), axes);
                let mut ga = vec![0.0; g.len()];
                for (gi, &s) in g.iter().zip(&src) {
                    ga[s] = *gi;
                }
                vec![(*a, ga)]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).len()))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let chunk = shp(*v)[*axis] * inner;
                        p.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut ga = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Gelu { a } => {
                let ga = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| gi * (std_normal_cdf(x) + x * std_normal_pdf(x)))
                    .collect();
                vec![(*a, ga)]
            }
            Op::RmsNorm { a, inv_rms } => {
                let x = val(*a);
                let d = *shp(*a).last().expect("rank >= 1");
                let mut ga = vec![0.0; x.len()];
                for (((xr, gr), gar), r) in x
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(ga.chunks_exact_mut(d))
                    .zip(inv_rms)
                {
                    let &(r, active) = r;
                    let c = if active {
                        let gx: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        r * r * r * gx / d as f64
                    } else {
                        0.0
                    };
                    for ((o, xi), gi) in gar.iter_mut().zip(xr).zip(gr) {
                        *o = r * gi - c * xi;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Cosine { a, b, eps } => {
                let (x, y) = (val(*a), val(*b));
                let d = *shp(*a).last().expect("rank >= 1");
                let mut ga = vec![0.0; x.len()];
                let mut gb = vec![0.0; y.len()];
                for (i, gi) in g.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    let (u, v) = (&x[r.clone()], &y[r.clone()]);
                    let (dot, nu, nv) = cosine_parts(u, v);
                    let den = (nu * nv).sqrt();
                    if den <= *eps {
                        for j in 0..d {
                            ga[r.start + j] = gi * v[j] / eps;
                            gb[r.start + j] = gi * u[j] / eps;
                        }
                    } else {
                        let c = dot / den;
                        for j in 0..d {
                            ga[r.start + j] = gi * (v[j] / den - c * u[j] / nu);
                            gb[r.start + j] = gi * (u[j] / den - c * v[j] / nv);
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum { a } => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean { a } => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::MaskedSelect { a, index } => {
                let mut ga = vec![0.0; val(*a).len()];
                for (gi, &i) in g.iter().zip(index) {
                    ga[i] = *gi;
                }
                vec![(*a, ga)]
            }
        }
    }
}

/// Dot product and squared norms of two rows.
fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (p, q) in u.iter().zip(v) {
        dot += p * q;
        nu += p * p;
        nv += q * q;
    }
    (dot, nu, nv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one input tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, h: f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -2.0, 2.0, &mut rng)
    }

    /// Checks the analytic gradient of `build` w.r.t. each input against
    /// finite differences.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        tape.backward(root).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let f = |xk: &Tensor| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.leaf(if j == k { xk.clone() } else { v.clone() }, false))
                    .collect();
                let r = build(&mut t, &vs);
                t.value(r).item().unwrap()
            };
            let num = numeric_grad(x, &f, 1e-5);
            let ana = tape.grad(vars[k]).expect("grad populated");
            for (i, (a, n)) in ana.data().iter().zip(&num).enumerate() {
                assert!(rel_err(*a, *n) < 1e-4, "input {k} elem {i}: {a} vs {n}");
            }
        }
    }

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn weighted(tape: &mut Tape, v: Var) -> Var {
        let shape = tape.shape(v).to_vec();
        let w = random(&shape, 99);
        let wv = tape.constant(w);
        let p = tape.mul(v, wv).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let m = t.constant(Tensor::matrix(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);

        let bad = t.matmul(a, a).unwrap_err();
        assert!(bad.to_string().contains("[1, 2]"), "{bad}");
    }

    #[test]
    fn matmul_gradient_example() {
        // d/dA sum(A·B) = 1·Bᵀ, rows of B summed: [[2+3, 4+5], ...]
        let mut t = Tape::new();
        let a = t.leaf(Tensor::eye(2), true);
        let b = t.constant(Tensor::matrix(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        let g = t.grad(a).unwrap();
        for (x, e) in g.data().iter().zip([5.0, 9.0, 5.0, 9.0]) {
            assert!((x - e).abs() < 1e-12);
        }
        check(
            &[
                Tensor::eye(2),
                Tensor::matrix(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap(),
            ],
            |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                t.sum(c)
            },
        );
    }

    #[test]
    fn matmul_batched_and_shared_gradients() {
        check(&[random(&[2, 3, 4], 1), random(&[2, 4, 5], 2)], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            weighted(t, c)
        });
        check(&[random(&[2, 3, 4], 3), random(&[4, 5], 4)], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            weighted(t, c)
        });
    }

    #[test]
    fn add_broadcast_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let z = t.constant(Tensor::zeros(&[3]));
        let s = t.add(a, z).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 3.0]);

        let m = t.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let col = t.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let s = t.add(m, col).unwrap();
        assert_eq!(t.value(s).data(), &[11.0, 12.0, 23.0, 24.0]);

        let bad = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(m, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn add_gradient_example() {
        // d/db (a+b)² = 2(a+b) = 6
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0]), true);
        let b = t.leaf(Tensor::vector(vec![2.0]), true);
        let s = t.add(a, b).unwrap();
        let sq = t.mul(s, s).unwrap();
        let r = t.sum(sq);
        t.backward(r).unwrap();
        assert!((t.grad(b).unwrap().data()[0] - 6.0).abs() < 1e-12);
        check(
            &[Tensor::vector(vec![1.0]), Tensor::vector(vec![2.0])],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let sq = t.mul(s, s).unwrap();
                t.sum(sq)
            },
        );
    }

    #[test]
    fn elementwise_gradients_with_broadcast() {
        for shape_b in [vec![3, 4], vec![4], vec![3, 1], vec![1, 4]] {
            let a = random(&[2, 3, 4], 5);
            let b = random(&shape_b, 6);
            check(&[a.clone(), b.clone()], |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                weighted(t, s)
            });
            check(&[a.clone(), b.clone()], |t, v| {
                let s = t.sub(v[0], v[1]).unwrap();
                weighted(t, s)
            });
            check(&[a, b], |t, v| {
                let s = t.mul(v[0], v[1]).unwrap();
                weighted(t, s)
            });
        }
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3]));
        let s = t.softmax(z, 0).unwrap();
        for x in t.value(s).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = t.softmax(big, 0).unwrap();
        let v = t.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_gradient_each_axis() {
        check(&[random(&[4], 7)], |t, v| {
            let s = t.softmax(v[0], 0).unwrap();
            weighted(t, s)
        });
        for axis in 0..3 {
            check(&[random(&[2, 3, 4], 8)], |t, v| {
                let s = t.softmax(v[0], axis).unwrap();
                weighted(t, s)
            });
        }
    }

    #[test]
    fn gelu_examples_and_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 12.0, -12.0]));
        let y = t.gelu(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 12.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
        check(&[random(&[6], 9)], |t, v| {
            let y = t.gelu(v[0]);
            weighted(t, y)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check(&[random(&[2, 3, 4], 10)], |t, v| {
            let y = t.transpose(v[0]).unwrap();
            weighted(t, y)
        });
        check(&[random(&[2, 3, 4], 11)], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1]).unwrap();
            weighted(t, y)
        });
        check(&[random(&[2, 3, 4], 12)], |t, v| {
            let y = t.reshape(v[0], &[6, 4]).unwrap();
            weighted(t, y)
        });
        for axis in 0..3 {
            check(&[random(&[2, 3, 4], 13), random(&[2, 3, 4], 14)], |t, v| {
                let y = t.concat(&[v[0], v[1]], axis).unwrap();
                weighted(t, y)
            });
        }
        check(&[random(&[3, 4], 15)], |t, v| {
            let y = t.scale(v[0], -0.7);
            let m = t.mean(y);
            let s = t.sum(v[0]);
            let p = t.mul(m, s).unwrap();
            t.sum(p)
        });
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        check(&[random(&[3, 4], 16)], |t, v| {
            let y = t.masked_select(v[0], &mask).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.mean(sq)
        });
    }

    #[test]
    fn normalisation_op_gradients() {
        check(&[random(&[3, 5], 17)], |t, v| {
            let y = t.rms_normalize(v[0], 1e-8).unwrap();
            weighted(t, y)
        });
        check(&[random(&[3, 5], 18), random(&[3, 5], 19)], |t, v| {
            let c = t.cosine(v[0], v[1], 1e-12).unwrap();
            weighted(t, c)
        });
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.5, -1.0, 3.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
        // a second call accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());

        assert!(matches!(t.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates_per_path() {
        let x0 = random(&[4], 20);
        let path = |t: &mut Tape, x: Var, which: u8| -> Var {
            match which {
                0 => {
                    let g = t.gelu(x);
                    t.sum(g)
                }
                _ => {
                    let s = t.softmax(x, 0).unwrap();
                    weighted(t, s)
                }
            }
        };
        let single = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let r = path(&mut t, x, which);
            t.backward(r).unwrap();
            t.grad(x).unwrap().clone()
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), true);
        let r0 = path(&mut t, x, 0);
        let r1 = path(&mut t, x, 1);
        let r = t.add(r0, r1).unwrap();
        t.backward(r).unwrap();
        let both = t.grad(x).unwrap();
        let (g0, g1) = (single(0), single(1));
        for i in 0..4 {
            assert!((both.data()[i] - g0.data()[i] - g1.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_of_identical_rows_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut t = Tape::new();
            let a = t.constant(Tensor::vector(v.clone()));
            let b = t.constant(Tensor::vector(v));
            let c = t.cosine(a, b, 1e-12).unwrap();
            assert_eq!(t.value(c).item().unwrap(), 1.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(xs in prop::collection::vec(-500.0f64..500.0, 12)) {
                let mut t = Tape::new();
                let x = t.constant(Tensor::new(vec![3, 4], xs).unwrap());
                for axis in 0..2 {
                    let s = t.softmax(x, axis).unwrap();
                    let v = t.value(s);
                    let (outer, len, inner) = split_axis(v.shape(), axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let sum: f64 = (0..len).map(|j| v.data()[o * len * inner + j * inner + i]).sum();
                            prop_assert!((sum - 1.0).abs() <= 1e-9);
                            prop_assert!(v.data().iter().all(|&p| p >= 0.0));
                        }
                    }
                }
            }

            #[test]
            fn reshape_transpose_round_trip(xs in prop::collection::vec(-10.0f64..10.0, 24)) {
                let x = Tensor::new(vec![2, 3, 4], xs).unwrap();
                let mut t = Tape::new();
                let v = t.constant(x.clone());
                let a = t.transpose(v).unwrap();
                let b = t.transpose(a).unwrap();
                let c = t.reshape(b, &[4, 6]).unwrap();
                let d = t.reshape(c, &[2, 3, 4]).unwrap();
                let p = t.permute(d, &[1, 2, 0]).unwrap();
                let q = t.permute(p, &[2, 0, 1]).unwrap();
                prop_assert_eq!(t.value(q), &x);
            }
        }
    }
}
