//! Small convolutional scene classifier used by the fidelity metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, NodeId, ParamStore};
use crate::nn::{Conv2d, GroupNorm, Linear};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub norm_groups: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { image_size: 32, in_channels: 3, channels: vec![16, 32, 64, 64], num_classes: 64, norm_groups: 8 }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ParamStore,
    stages: Vec<Stage>,
    head: Linear,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.channels.iter().any(|c| c % config.norm_groups != 0) {
            return Err(Error::Config(format!("bad classifier channels {:?}", config.channels)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(Stage {
                conv: Conv2d::new(&mut p, &format!("stage.{i}.conv"), cin, c, 3, stride, &mut rng),
                norm: GroupNorm::new(&mut p, &format!("stage.{i}.norm"), c, config.norm_groups),
            });
            cin = c;
        }
        let head = Linear::new(&mut p, "head", cin, config.num_classes, &mut rng);
        Ok(Self { config, params: p, stages, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn build(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for s in &self.stages {
            h = s.conv.forward(g, h)?;
            h = s.norm.forward(g, h)?;
            h = g.silu(h);
        }
        let pooled = g.mean_pool(h)?;
        self.head.forward(g, pooled)
    }

    /// Class probabilities `[n, num_classes]` for images `[n, C, H, W]`.
    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let x = g.input(images.clone());
        let logits = self.build(&mut g, x)?;
        softmax_rows(g.value(logits))
    }
}
