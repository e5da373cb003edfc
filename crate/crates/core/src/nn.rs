//! Parameterised layers over [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::tensor::Tensor;

fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f32, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f32).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(vec![cout, cin, kernel, kernel], bound, rng));
        let b = store.add(format!("{name}.bias"), uniform(vec![cout], bound, rng));
        Self { w, b, stride, pad: kernel / 2 }
    }

    /// Same layout as [`Conv2d::new`] with weights and bias set to zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(vec![cout, cin, kernel, kernel]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Self { w, b, stride: 1, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (din as f32).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(vec![dout, din], bound, rng));
        let b = store.add(format!("{name}.bias"), uniform(vec![dout], bound, rng));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(vec![channels], 1.0));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.weight"), Tensor::randn(vec![vocab, dim], rng));
        Self { table }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<NodeId> {
        let t = g.param(self.table);
        g.embedding(t, ids)
    }
}

/// Pre-activation residual block; the embedding scales and shifts the normalised hidden state.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb_proj: Linear::new(store, &format!("{name}.emb_proj"), emb_dim, 2 * cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::zeroed(store, &format!("{name}.conv2"), cout, cout, 3),
            shortcut: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, 1, rng)),
        }
    }

    /// `emb` is the already-activated embedding `[n, emb_dim]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, emb: NodeId) -> Result<NodeId> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let e = self.emb_proj.forward(g, emb)?;
        let h = g.film(h, e)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}
