//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`GradientTape`] evaluates eagerly: every operation computes its value
//! immediately and appends a node. Nodes are stored in creation order, which
//! is a topological order, so [`GradientTape::backward`] is a single reverse
//! sweep. Parameters enter the tape by name and come back out as named
//! gradients; everything else is a constant.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Tensors keyed by parameter name, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    map: IndexMap<String, Tensor>,
}

pub type ParamSet = NamedTensors;
pub type Gradients = NamedTensors;

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Adds `other` into `self` entry by entry, inserting missing names.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (name, t) in other.iter() {
            match self.map.get_mut(name) {
                Some(acc) => *acc = acc.add(t)?,
                None => {
                    self.map.insert(name.to_string(), t.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            *t = t.scale(factor);
        }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Conv1dSame(Var, Tensor),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    MeanAll(Var),
    SumAll(Var),
    StackScalars(Vec<Var>),
    Element(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectRow(Var, usize),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the original node, so gradients from every use accumulate there.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Param);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Element-wise sum of equally shaped operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Element-wise product of equally shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds a length-`c` bias to every row of an `r × c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.numel() != c {
            return Err(Error::dim("add_row_bias", self.value(x).shape(), b.shape()));
        }
        let bias_row = b.reshape(&[1, c])?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias_row.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(&[r, c], data)?;
        Ok(self.push(value, Op::AddRowBias(x, bias)))
    }

    /// Multiplies a tensor by a one-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("mul_scalar", s)?;
        let value = self.value(x).mul(self.value(s))?;
        Ok(self.push(value, Op::MulScalar(x, s)))
    }

    /// Divides a tensor by a one-element node.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("div_scalar", s)?;
        let d = self.value(s).data()[0];
        let value = self.value(x).map(|v| v / d);
        Ok(self.push(value, Op::DivScalar(x, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Sequence-axis convolution with a fixed (non-trainable) kernel.
    pub fn conv1d_same(&mut self, a: Var, kernel: &Tensor) -> Result<Var> {
        let value = self.value(a).conv1d_same(kernel)?;
        Ok(self.push(value, Op::Conv1dSame(a, kernel.clone())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Per-row layer normalization with learned gain and offset (length `c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let (g, o) = (self.value(gain), self.value(offset));
        if g.numel() != c || o.numel() != c {
            return Err(Error::dim("layer_norm", xv.shape(), g.shape()));
        }
        let (normalized, inv_std) = normalize_rows(xv, eps)?;
        let mut data = normalized.data().to_vec();
        for row in data.chunks_mut(c) {
            for ((y, &gv), &ov) in row.iter_mut().zip(g.data()).zip(o.data()) {
                *y = *y * gv + ov;
            }
        }
        let value = Tensor::new(&[r, c], data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Gathers one-element nodes into a `1 × n` row.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check_scalar("stack_scalars", p)?;
            data.push(self.value(p).data()[0]);
        }
        let value = Tensor::new(&[1, parts.len()], data)?;
        Ok(self.push(value, Op::StackScalars(parts.to_vec())))
    }

    /// Flat element `index` as a one-element node.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let av = self.value(a);
        let x = *av
            .data()
            .get(index)
            .ok_or_else(|| Error::dim("element", av.shape(), &[index]))?;
        Ok(self.push(Tensor::scalar(x), Op::Element(a, index)))
    }

    /// Rows `ids` of a `V × d` table, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Input {
                    position,
                    message: format!("row {id} out of range for table of {v} rows"),
                });
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let value = self.value(a).row(i)?;
        Ok(self.push(value, Op::SelectRow(a, i)))
    }

    /// Mean over rows, as a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut data = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (o, &x) in data.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut data {
            *o /= r as f64;
        }
        let value = Tensor::new(&[1, c], data)?;
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Negative log-likelihood of `target` under softmax of a logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.numel();
        if target >= classes {
            return Err(Error::Input {
                position: 0,
                message: format!("target class {target} with only {classes} logits"),
            });
        }
        let probs = lv.reshape(&[1, classes])?.softmax_rows()?;
        let data = lv.data();
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - data[target]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim(op, sv.shape(), &[1]));
        }
        Ok(())
    }

    /// Back-propagates from a one-element `root` and returns the gradient of
    /// every registered parameter, in registration order. Parameters the root
    /// does not depend on get zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_scalar("backward", root)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = Gradients::new();
        for (name, &v) in &self.params {
            let shape = self.value(v).shape();
            let t = match grads.get(v.0).and_then(Option::as_ref) {
                Some(g) => Tensor::new(shape, g.clone())?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (_, k) = val(*a).dims2()?;
                let (_, p) = val(*b).dims2()?;
                let av = val(*a).data();
                // dA = G · Bᵀ, accumulated row by row from a transposed B.
                let bt = val(*b).transpose()?;
                let btv = bt.data();
                acc(*a, &mut |ga| {
                    for (ga_row, g_row) in ga.chunks_mut(k).zip(g.chunks(p)) {
                        for (&gij, bt_row) in g_row.iter().zip(btv.chunks(k)) {
                            axpy(ga_row, gij, bt_row);
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |gb| {
                    for (a_row, g_row) in av.chunks(k).zip(g.chunks(p)) {
                        for (&a_it, gb_row) in a_row.iter().zip(gb.chunks_mut(p)) {
                            axpy(gb_row, a_it, g_row);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| add_into(gv, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, factor) => acc(*a, &mut |ga| {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += factor * gi;
                }
            }),
            Op::AddRowBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let c = val(*bias).numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s).data()[0];
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += sv * gi;
                    }
                });
                let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                acc(*s, &mut |gs| gs[0] += dot);
            }
            Op::DivScalar(x, s) => {
                let sv = val(*s).data()[0];
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi / sv;
                    }
                });
                let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                acc(*s, &mut |gs| gs[0] -= dot / (sv * sv));
            }
            Op::Relu(a) => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = node.value.dims2()?;
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((go, gi), yi) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in go.iter_mut().zip(gi).zip(yi) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Conv1dSame(a, kernel) => {
                let (l, d) = val(*a).dims2()?;
                let half = (kernel.numel() / 2) as isize;
                acc(*a, &mut |ga| {
                    for i in 0..l {
                        for (tap, &w) in kernel.data().iter().enumerate() {
                            let src = i as isize + tap as isize - half;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let src = src as usize;
                            for j in 0..d {
                                ga[src * d + j] += w * g[i * d + j];
                            }
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (_, c) = val(*a).dims2()?;
                let (_, w) = node.value.dims2()?;
                acc(*a, &mut |ga| {
                    for (row_out, row_in) in ga.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut row_out[*start..start + w], row_in);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (_, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    acc(p, &mut |gp| {
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dst, &src[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            } => {
                let (_, c) = normalized.dims2()?;
                let xhat = normalized.data();
                let gv = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += a * b;
                        }
                    }
                });
                acc(*offset, &mut |go| {
                    for gr in g.chunks(c) {
                        add_into(go, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    for (((dst, gr), xr), &istd) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .zip(inv_std)
                    {
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, &dh), &xh) in dst.iter_mut().zip(&dxhat).zip(xr) {
                            *o += istd * (dh - mean_d - xh * mean_dx);
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::StackScalars(parts) => {
                for (&p, &gi) in parts.iter().zip(g) {
                    acc(p, &mut |gp| gp[0] += gi);
                }
            }
            Op::Element(a, index) => acc(*a, &mut |ga| ga[*index] += g[0]),
            Op::GatherRows(table, ids) => {
                let (_, d) = val(*table).dims2()?;
                acc(*table, &mut |gt| {
                    for (&id, gr) in ids.iter().zip(g.chunks(d)) {
                        add_into(&mut gt[id * d..(id + 1) * d], gr);
                    }
                });
            }
            Op::SelectRow(a, i) => {
                let (_, c) = val(*a).dims2()?;
                acc(*a, &mut |ga| add_into(&mut ga[i * c..(i + 1) * c], g));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).dims2()?;
                acc(*a, &mut |ga| {
                    for row in ga.chunks_mut(c) {
                        for (o, &gi) in row.iter_mut().zip(g) {
                            *o += gi / r as f64;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => acc(*logits, &mut |gl| {
                for (i, (o, &p)) in gl.iter_mut().zip(probs.data()).enumerate() {
                    let onehot = if i == *target { 1.0 } else { 0.0 };
                    *o += g[0] * (p - onehot);
                }
            }),
        }
        Ok(())
    }
}

/// `y += a · x`.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// Zero-mean, unit-variance rows (population variance, `eps` inside the
/// square root). Returns the normalized matrix and each row's `1/σ`.
pub fn normalize_rows(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = x.dims2()?;
    let mut data = x.data().to_vec();
    let mut inv_std = Vec::with_capacity(r);
    for row in data.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * istd;
        }
        inv_std.push(istd);
    }
    Ok((Tensor::new(&[r, c], data)?, inv_std))
}
