//! A small reverse-mode tape over [`Tensor`] covering exactly the operations
//! the U-Net and the metrics classifier use.
//!
//! Parameters live in a [`ParamStore`] that the graph borrows immutably; a
//! backward pass returns gradients indexed by [`ParamId`] and leaves the
//! store untouched. Convolution patch matrices are recomputed during backward
//! instead of being kept alive on the tape.

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Overwrites every parameter from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load_named<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in named {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name}")))?;
            if self.values[idx].shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    self.values[idx].shape(),
                    t.shape()
                )));
            }
            self.values[idx] = t.clone();
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("parameter {} not provided", self.names[missing])));
        }
        Ok(())
    }
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: Vec<(f32, f32)> },
    Silu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddChannel { x: NodeId, v: NodeId },
    Film { x: NodeId, v: NodeId },
    Concat { a: NodeId, b: NodeId },
    Upsample2x { x: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    MeanPool { x: NodeId },
    Mse { a: NodeId, target: Tensor },
    CrossEntropy { logits: NodeId, targets: Tensor, probs: Tensor },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients produced by [`Graph::backward`], one slot per parameter.
pub struct Grads(pub Vec<Option<Tensor>>);

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, k, k2) = self.value(w).dims4()?;
        if ci != c || k != k2 || self.value(b).shape() != [co] {
            return Err(Error::Shape(format!(
                "conv2d input {:?} weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let p = oh * ow;
        let kk = c * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = self.value(b).data();
        // One image at a time keeps the patch matrix cache-resident.
        let mut cols = vec![0.0f32; kk * p];
        let mut y = vec![0.0f32; n * co * p];
        for i in 0..n {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, stride, pad, &mut cols, p);
            let yi = &mut y[i * co * p..(i + 1) * co * p];
            for (o, row) in yi.chunks_exact_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            gemm(co, kk, p, wv, false, &cols, false, yi, 1.0);
        }
        let y = Tensor::new(vec![n, co, oh, ow], y)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// `x [n, in] -> x w^T + b` with `w [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear input {xs:?} weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let bias = self.value(b).data();
        let mut y: Vec<f32> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut y, 1.0);
        let y = Tensor::new(vec![n, dout], y)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c % groups != 0 {
            return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
        }
        let per = c / groups * h * w;
        let hw = h * w;
        let cg = c / groups;
        let xv = self.value(x).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut y = vec![0.0f32; xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let base = (i * c + g * cg) * hw;
                let seg = &xv[base..base + per];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
                let rstd = 1.0 / (var + 1e-5).sqrt();
                let (mean, rstd) = (mean as f32, rstd as f32);
                stats.push((mean, rstd));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let off = base + cc * hw;
                    for j in 0..hw {
                        y[off + j] = (xv[off + j] - mean) * rstd * gm[ch] + bt[ch];
                    }
                }
            }
        }
        let y = Tensor::new(vec![n, c, h, w], y)?;
        Ok(self.push(y, Op::GroupNorm { x, gamma, beta, groups, stats }))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(y, Op::Silu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// Adds a per-(item, channel) vector `v [n, c]` over the spatial dims of `x [n, c, h, w]`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [n, c] {
            return Err(Error::Shape(format!("add_channel {:?} + {:?}", self.value(x).shape(), self.value(v).shape())));
        }
        let hw = h * w;
        let vv = self.value(v).data();
        let mut y = self.value(x).clone();
        for (idx, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            let add = vv[idx];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        Ok(self.push(y, Op::AddChannel { x, v }))
    }

    /// Feature-wise modulation `x · (1 + scale) + shift`, with `v [n, 2c]` holding scale then shift.
    pub fn film(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [n, 2 * c] {
            return Err(Error::Shape(format!("film {:?} by {:?}", self.value(x).shape(), self.value(v).shape())));
        }
        let hw = h * w;
        let vv = self.value(v).data();
        let mut y = self.value(x).clone();
        for (idx, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            let (item, ch) = (idx / c, idx % c);
            let (scale, shift) = (1.0 + vv[item * 2 * c + ch], vv[item * 2 * c + c + ch]);
            chunk.iter_mut().for_each(|e| *e = *e * scale + shift);
        }
        Ok(self.push(y, Op::Film { x, v }))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!("concat {:?} with {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            y.extend_from_slice(&av[i * sa..(i + 1) * sa]);
            y.extend_from_slice(&bv[i * sb..(i + 1) * sb]);
        }
        let y = Tensor::new(vec![n, ca + cb, h, w], y)?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = vec![0.0f32; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
            for yy in 0..oh {
                for xx in 0..ow {
                    dst[yy * ow + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        let y = Tensor::new(vec![n, c, oh, ow], y)?;
        Ok(self.push(y, Op::Upsample2x { x }))
    }

    /// Row lookup `table [vocab, d] -> [ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ts = self.value(table).shape().to_vec();
        let (vocab, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut y = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Shape(format!("embedding id {id} out of range {vocab}")));
            }
            y.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let y = Tensor::new(vec![ids.len(), d], y)?;
        Ok(self.push(y, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Global average pool `[n, c, h, w] -> [n, c]`.
    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let y: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let y = Tensor::new(vec![n, c], y)?;
        Ok(self.push(y, Op::MeanPool { x }))
    }

    /// Mean squared error against a constant target; yields a scalar node.
    pub fn mse(&mut self, a: NodeId, target: Tensor) -> Result<NodeId> {
        self.value(a).check_same(&target)?;
        let n = target.len() as f64;
        let loss =
            self.value(a).data().iter().zip(target.data()).map(|(&p, &t)| ((p - t) as f64).powi(2)).sum::<f64>() / n;
        let y = Tensor::new(vec![1], vec![loss as f32])?;
        Ok(self.push(y, Op::Mse { a, target }))
    }

    /// Mean softmax cross-entropy of `logits [n, k]` against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || labels.len() != s[0] || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::Shape("cross_entropy labels do not match logits".into()));
        }
        let mut targets = Tensor::zeros(s.clone());
        for (i, &l) in labels.iter().enumerate() {
            targets.data_mut()[i * s[1] + l] = 1.0;
        }
        self.cross_entropy_soft(logits, targets)
    }

    /// Mean softmax cross-entropy against target distributions `[n, k]` (rows summing to 1).
    pub fn cross_entropy_soft(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        let probs = softmax_rows(self.value(logits))?;
        probs.check_same(&targets)?;
        let n = probs.shape()[0];
        let loss = probs
            .data()
            .iter()
            .zip(targets.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -(t as f64) * (p.max(1e-12) as f64).ln())
            .sum::<f64>()
            / n as f64;
        let y = Tensor::new(vec![1], vec![loss as f32])?;
        Ok(self.push(y, Op::CrossEntropy { logits, targets, probs }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        let mut out = Grads((0..self.params.len()).map(|_| None).collect());

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(p) => out.0[p.0] = Some(gy),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = self.conv2d_backward(&gy, *x, *w, *stride, *pad)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, din) = (xv.shape()[0], xv.shape()[1]);
                    let dout = wv.shape()[0];
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, gy.data(), false, wv.data(), false, &mut dx, 0.0);
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, gy.data(), true, xv.data(), false, &mut dw, 0.0);
                    let mut db = vec![0.0f32; dout];
                    for row in gy.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, din], dx)?)?;
                    accumulate(&mut grads, *w, Tensor::new(vec![dout, din], dw)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vec![dout], db)?)?;
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (dx, dg, db) = self.group_norm_backward(&gy, *x, *gamma, *groups, stats)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dg)?;
                    accumulate(&mut grads, *beta, db)?;
                }
                Op::Silu { x } => {
                    let dx = self.value(*x).zip_map(&gy, |v, g| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * s * (1.0 + v * (1.0 - s))
                    })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone())?;
                    accumulate(&mut grads, *b, gy)?;
                }
                Op::AddChannel { x, v } => {
                    let (_, _, h, w) = gy.dims4()?;
                    let dv: Vec<f32> = gy.data().chunks(h * w).map(|c| c.iter().sum()).collect();
                    let vs = self.value(*v).shape().to_vec();
                    accumulate(&mut grads, *v, Tensor::new(vs, dv)?)?;
                    accumulate(&mut grads, *x, gy)?;
                }
                Op::Film { x, v } => {
                    let xv = self.value(*x);
                    let vv = self.value(*v).data();
                    let (_, c, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    let mut dv = Tensor::zeros(self.value(*v).shape().to_vec());
                    for (idx, ((dxc, xc), gc)) in
                        dx.data_mut().chunks_mut(hw).zip(xv.data().chunks(hw)).zip(gy.data().chunks(hw)).enumerate()
                    {
                        let (item, ch) = (idx / c, idx % c);
                        let scale = 1.0 + vv[item * 2 * c + ch];
                        let (mut ds, mut db) = (0.0f64, 0.0f64);
                        for ((d, &xe), &ge) in dxc.iter_mut().zip(xc).zip(gc) {
                            *d = ge * scale;
                            ds += (ge * xe) as f64;
                            db += ge as f64;
                        }
                        dv.data_mut()[item * 2 * c + ch] = ds as f32;
                        dv.data_mut()[item * 2 * c + c + ch] = db as f32;
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).dims4()?;
                    let cb = self.value(*b).dims4()?.1;
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * sa);
                    let mut dbv = Vec::with_capacity(n * sb);
                    for chunk in gy.data().chunks(sa + sb) {
                        da.extend_from_slice(&chunk[..sa]);
                        dbv.extend_from_slice(&chunk[sa..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, ca, h, w], da)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vec![n, cb, h, w], dbv)?)?;
                }
                Op::Upsample2x { x } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let ow = 2 * w;
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for plane in 0..n * c {
                        let src = &gy.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for (yy, row) in src.chunks(ow).enumerate() {
                            for (xx, g) in row.iter().enumerate() {
                                dst[(yy / 2) * w + xx / 2] += g;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, c, h, w], dx)?)?;
                }
                Op::Embedding { table, ids } => {
                    let ts = self.value(*table).shape().to_vec();
                    let d = ts[1];
                    let mut dt = Tensor::zeros(ts);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&gy.data()[row * d..(row + 1) * d]).for_each(|(a, g)| *a += g);
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::MeanPool { x } => {
                    let xs = self.value(*x).shape().to_vec();
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f32;
                    let dx: Vec<f32> = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?)?;
                }
                Op::Mse { a, target } => {
                    let s = gy.data()[0] * 2.0 / target.len() as f32;
                    let da = self.value(*a).zip_map(target, |p, t| (p - t) * s)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = gy.data()[0] / probs.shape()[0] as f32;
                    let d = probs.zip_map(targets, |p, t| (p - t) * s)?;
                    accumulate(&mut grads, *logits, d)?;
                }
            }
        }
        Ok(out)
    }

    fn conv2d_backward(
        &self,
        gy: &Tensor,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4()?;
        let (co, _, k, _) = wv.dims4()?;
        let (_, _, oh, ow) = gy.dims4()?;
        let p = oh * ow;
        let kk = c * k * k;

        let mut db = vec![0.0f32; co];
        let mut dw = vec![0.0f32; co * kk];
        let mut dx = vec![0.0f32; n * c * h * wd];
        let mut cols = vec![0.0f32; kk * p];
        for i in 0..n {
            let gyi = &gy.data()[i * co * p..(i + 1) * co * p];
            for (o, row) in gyi.chunks_exact(p).enumerate() {
                db[o] += row.iter().sum::<f32>();
            }
            im2col(&xv.data()[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, stride, pad, &mut cols, p);
            gemm(co, p, kk, gyi, false, &cols, true, &mut dw, 1.0);
            // Reuse the patch buffer for the input gradient.
            gemm(kk, co, p, wv.data(), true, gyi, false, &mut cols, 0.0);
            col2im(&cols, p, c, h, wd, k, stride, pad, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
        }
        Ok((Tensor::new(vec![n, c, h, wd], dx)?, Tensor::new(wv.shape().to_vec(), dw)?, Tensor::new(vec![co], db)?))
    }

    fn group_norm_backward(
        &self,
        gy: &Tensor,
        x: NodeId,
        gamma: NodeId,
        groups: usize,
        stats: &[(f32, f32)],
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let xv = self.value(x);
        let gm = self.value(gamma).data();
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let cg = c / groups;
        let per = cg * hw;
        let mut dx = vec![0.0f32; xv.len()];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for i in 0..n {
            for g in 0..groups {
                let (mean, rstd) = stats[i * groups + g];
                let base = (i * c + g * cg) * hw;
                let mut sum1 = 0.0f64;
                let mut sum2 = 0.0f64;
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    for j in 0..hw {
                        let o = base + cc * hw + j;
                        let xhat = (xv.data()[o] - mean) * rstd;
                        let dyv = gy.data()[o];
                        let dxhat = (dyv * gm[ch]) as f64;
                        sum1 += dxhat;
                        sum2 += dxhat * xhat as f64;
                        dgamma[ch] += (dyv * xhat) as f64;
                        dbeta[ch] += dyv as f64;
                    }
                }
                let m = per as f64;
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    for j in 0..hw {
                        let o = base + cc * hw + j;
                        let xhat = ((xv.data()[o] - mean) * rstd) as f64;
                        let dxhat = (gy.data()[o] * gm[ch]) as f64;
                        dx[o] = (rstd as f64 / m * (m * dxhat - sum1 - xhat * sum2)) as f32;
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![n, c, h, w], dx)?,
            Tensor::new(vec![c], dgamma.into_iter().map(|v| v as f32).collect())?,
            Tensor::new(vec![c], dbeta.into_iter().map(|v| v as f32).collect())?,
        ))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Row-wise softmax of a `[n, k]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("softmax expects [n, k], got {s:?}")));
    }
    let k = s[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v as f64;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / z) as f32;
        }
    }
    Ok(out)
}
