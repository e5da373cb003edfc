//! Conditional noise-prediction U-Net with addressable skip connections.
//!
//! The encoder mirrors the Stable Diffusion layout at desk scale: a stem
//! convolution, four blocks of `subblocks_per_block` subblocks each (the last
//! subblock of the first three blocks halves the resolution), a two-block
//! bottleneck and a decoder that consumes every skip in reverse order by
//! channel concatenation. Every subblock output is a tap:
//!
//! * `l = 0` is the stem output,
//! * `l = 1 + b * subblocks_per_block + s` is subblock `s` of block `b`,
//! * `h` is the bottleneck output handed to the decoder.
//!
//! A [`TapController`] passed to [`UNetModel::forward`] can record any tap or
//! replace it (blended under a channel mask) before the decoder reads it.
//!
//! The network head can be read as the noise directly ([`Prediction::Epsilon`])
//! or as the velocity `v = √ᾱ·ε − √(1−ᾱ)·x₀` ([`Prediction::V`]). Either way
//! `forward` returns the noise prediction, so samplers only ever see ε.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::injection::blend;
use crate::nn::{Conv2d, Embedding, GroupNorm, Linear, ResBlock};
use crate::scheduler::{DiffusionSchedule, ScheduleConfig};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub subblocks_per_block: usize,
    pub time_embed_dim: usize,
    pub num_conditions: usize,
    pub cond_embed_dim: usize,
    pub norm_groups: usize,
    pub norm: String,
    pub activation: String,
    /// What the network head outputs; checkpoints without the field predate `v`.
    #[serde(default)]
    pub prediction: Prediction,
}

/// Output parametrization of the network head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    #[default]
    Epsilon,
    /// Velocity; turned into noise with the model's diffusion schedule.
    V,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            block_channels: vec![32, 64, 96, 128],
            subblocks_per_block: 3,
            time_embed_dim: 128,
            num_conditions: 64,
            cond_embed_dim: 64,
            norm_groups: 8,
            norm: "group_norm".into(),
            activation: "silu".into(),
            prediction: Prediction::V,
        }
    }
}

impl UNetConfig {
    /// The reduced-width configuration the bundled desk checkpoint is trained with.
    pub fn desk() -> Self {
        Self { block_channels: vec![16, 32, 48, 64], time_embed_dim: 64, cond_embed_dim: 32, ..Self::default() }
    }

    /// A very small configuration for fast smoke tests.
    pub fn smoke() -> Self {
        Self {
            block_channels: vec![8, 8, 16, 16],
            time_embed_dim: 16,
            cond_embed_dim: 8,
            norm_groups: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != NUM_BLOCKS {
            return Err(Error::Config(format!(
                "block_channels must list {NUM_BLOCKS} widths, got {}",
                self.block_channels.len()
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!("image_size {} is not divisible by 8", self.image_size)));
        }
        if self.subblocks_per_block == 0 {
            return Err(Error::Config("subblocks_per_block must be at least 1".into()));
        }
        if self.in_channels == 0 || self.num_conditions == 0 || self.time_embed_dim == 0 || self.cond_embed_dim == 0 {
            return Err(Error::Config("channel and embedding sizes must be positive".into()));
        }
        if self.norm_groups == 0 || self.block_channels.iter().any(|&c| c == 0 || c % self.norm_groups != 0) {
            return Err(Error::Config(format!(
                "block widths {:?} must be positive multiples of norm_groups {}",
                self.block_channels, self.norm_groups
            )));
        }
        if self.norm != "group_norm" || self.activation != "silu" {
            return Err(Error::Config("only group_norm + silu are implemented".into()));
        }
        Ok(())
    }

    pub fn num_skip_taps(&self) -> usize {
        1 + NUM_BLOCKS * self.subblocks_per_block
    }

    /// Every tap with its native `[channels, height, width]`, in index order with `h` last.
    pub fn tap_shapes(&self) -> Vec<(TapId, [usize; 3])> {
        let s = self.subblocks_per_block;
        let mut out = vec![(TapId::Skip(0), [self.block_channels[0], self.image_size, self.image_size])];
        for b in 0..NUM_BLOCKS {
            let c = self.block_channels[b];
            for sub in 0..s {
                let downs = if b < NUM_BLOCKS - 1 && sub == s - 1 { b + 1 } else { b };
                let res = self.image_size >> downs;
                out.push((TapId::Skip((1 + b * s + sub) as u8), [c, res, res]));
            }
        }
        let last = self.block_channels[NUM_BLOCKS - 1];
        let res = self.image_size >> (NUM_BLOCKS - 1);
        out.push((TapId::H, [last, res, res]));
        out
    }

    pub fn tap_shape(&self, tap: TapId) -> Option<[usize; 3]> {
        self.tap_shapes().into_iter().find(|(t, _)| *t == tap).map(|(_, s)| s)
    }

    /// All taps of group `g` (1-based, `subblocks_per_block` consecutive skips after the stem).
    pub fn group_taps(&self, group: usize) -> Vec<TapId> {
        let s = self.subblocks_per_block;
        if group == 0 || group > NUM_BLOCKS {
            return Vec::new();
        }
        (0..s).map(|i| TapId::Skip((1 + (group - 1) * s + i) as u8)).collect()
    }

    pub fn has_tap(&self, tap: TapId) -> bool {
        match tap {
            TapId::H => true,
            TapId::Skip(l) => (l as usize) < self.num_skip_taps(),
        }
    }
}

/// A skip connection index or the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapId {
    Skip(u8),
    H,
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapId::Skip(l) => write!(f, "{l}"),
            TapId::H => f.write_str("h"),
        }
    }
}

impl FromStr for TapId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("h") {
            return Ok(TapId::H);
        }
        s.parse::<u8>().map(TapId::Skip).map_err(|_| Error::invalid("taps", format!("unknown tap {s:?}")))
    }
}

impl Serialize for TapId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TapId::Skip(l) => s.serialize_u8(*l),
            TapId::H => s.serialize_str("h"),
        }
    }
}

impl<'de> Deserialize<'de> for TapId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(TapId::Skip(n)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// A class condition; `None` is the null condition used by the unconditional CFG branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conditioning {
    pub class_id: Option<u32>,
}

impl Conditioning {
    pub fn class(id: u32) -> Self {
        Self { class_id: Some(id) }
    }

    pub fn null() -> Self {
        Self { class_id: None }
    }

    pub fn validate(&self, num_conditions: usize) -> Result<()> {
        match self.class_id {
            Some(c) if c as usize >= num_conditions => {
                Err(Error::invalid("cond", format!("class {c} out of range ({num_conditions} classes)")))
            }
            _ => Ok(()),
        }
    }

    fn embedding_index(&self, num_conditions: usize) -> usize {
        self.class_id.map_or(num_conditions, |c| c as usize)
    }
}

/// Replacement applied to a tap: `blend(live, feature, gamma, mask)`.
///
/// `feature` is `[1, C, H, W]` (shared by every batch item) or `[n, C, H, W]`
/// (one per item). `mask[c]` selects the injected blend for channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub feature: Tensor,
    pub gamma: f32,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum TapMode {
    #[default]
    Passthrough,
    Record,
    Inject(Injection),
}

/// Per-call tap modes. Taps not present are passthrough.
#[derive(Debug, Clone, Default)]
pub struct TapController {
    modes: BTreeMap<TapId, TapMode>,
}

impl TapController {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recording(taps: impl IntoIterator<Item = TapId>) -> Self {
        let mut c = Self::new();
        for t in taps {
            c.set(t, TapMode::Record);
        }
        c
    }

    pub fn set(&mut self, tap: TapId, mode: TapMode) {
        if mode == TapMode::Passthrough {
            self.modes.remove(&tap);
        } else {
            self.modes.insert(tap, mode);
        }
    }

    pub fn mode(&self, tap: TapId) -> &TapMode {
        static PASS: TapMode = TapMode::Passthrough;
        self.modes.get(&tap).unwrap_or(&PASS)
    }

    pub fn is_passthrough(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn injected_taps(&self) -> impl Iterator<Item = TapId> + '_ {
        self.modes.iter().filter(|(_, m)| matches!(m, TapMode::Inject(_))).map(|(t, _)| *t)
    }
}

/// Features captured from taps in `Record` mode, each `[n, C, H, W]`.
pub type SkipBundle = BTreeMap<TapId, Tensor>;

#[derive(Debug, Clone)]
enum EncoderStage {
    Res(ResBlock),
    Down(Conv2d),
}

#[derive(Debug, Clone)]
struct DecoderStage {
    tap: TapId,
    upsample: Option<Conv2d>,
    block: ResBlock,
}

#[derive(Debug, Clone)]
struct Layers {
    time_in: Linear,
    time_out: Linear,
    cond_embed: Embedding,
    cond_proj: Linear,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    mid: [ResBlock; 2],
    decoder: Vec<DecoderStage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

/// Parameters plus layer wiring. Immutable after construction; `forward` takes `&self`.
#[derive(Debug, Clone)]
pub struct UNetModel {
    config: UNetConfig,
    params: ParamStore,
    layers: Layers,
    /// `ᾱ_t` of the schedule the head is parametrized against (only read for `v`).
    alpha_bars: Vec<f64>,
}

/// Deterministically initialised model for `(config, seed)`.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<UNetModel> {
    UNetModel::new(config.clone(), seed)
}

impl UNetModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let ch = &config.block_channels;
        let groups = config.norm_groups;
        let emb = config.time_embed_dim;
        let s = config.subblocks_per_block;

        let time_in = Linear::new(&mut p, "time.in", emb, emb, &mut rng);
        let time_out = Linear::new(&mut p, "time.out", emb, emb, &mut rng);
        let cond_embed =
            Embedding::new(&mut p, "cond.table", config.num_conditions + 1, config.cond_embed_dim, &mut rng);
        let cond_proj = Linear::new(&mut p, "cond.proj", config.cond_embed_dim, emb, &mut rng);
        let stem = Conv2d::new(&mut p, "stem", config.in_channels, ch[0], 3, 1, &mut rng);

        let mut encoder = Vec::new();
        let mut c_prev = ch[0];
        for (b, &c_out) in ch.iter().enumerate() {
            for sub in 0..s {
                let l = 1 + b * s + sub;
                let name = format!("enc.{l}");
                if b < NUM_BLOCKS - 1 && sub == s - 1 {
                    encoder.push(EncoderStage::Down(Conv2d::new(&mut p, &name, c_prev, c_prev, 3, 2, &mut rng)));
                } else {
                    encoder.push(EncoderStage::Res(ResBlock::new(&mut p, &name, c_prev, c_out, emb, groups, &mut rng)));
                    c_prev = c_out;
                }
            }
        }
        let last = ch[NUM_BLOCKS - 1];
        let mid = [
            ResBlock::new(&mut p, "mid.0", c_prev, last, emb, groups, &mut rng),
            ResBlock::new(&mut p, "mid.1", last, last, emb, groups, &mut rng),
        ];

        let taps = config.tap_shapes();
        let mut decoder = Vec::new();
        let mut x_ch = last;
        let mut x_res = config.image_size >> (NUM_BLOCKS - 1);
        for (tap, [tc, tres, _]) in taps.iter().rev().skip(1) {
            let name = format!("dec.{tap}");
            let upsample = if *tres > x_res {
                x_res = *tres;
                Some(Conv2d::new(&mut p, &format!("{name}.up"), x_ch, x_ch, 3, 1, &mut rng))
            } else {
                None
            };
            let out_ch = *tc;
            let block = ResBlock::new(&mut p, &name, x_ch + tc, out_ch, emb, groups, &mut rng);
            decoder.push(DecoderStage { tap: *tap, upsample, block });
            x_ch = out_ch;
        }
        let out_norm = GroupNorm::new(&mut p, "out.norm", x_ch, groups);
        let out_conv = Conv2d::zeroed(&mut p, "out.conv", x_ch, config.in_channels, 3);

        Ok(Self {
            config,
            params: p,
            layers: Layers {
                time_in,
                time_out,
                cond_embed,
                cond_proj,
                stem,
                encoder,
                mid,
                decoder,
                out_norm,
                out_conv,
            },
            alpha_bars: ScheduleConfig::default().build()?.alphas_cumprod().to_vec(),
        })
    }

    /// Binds the diffusion schedule used to convert a `v` head into noise.
    /// Models start out bound to the default schedule.
    pub fn set_schedule(&mut self, schedule: &DiffusionSchedule) {
        self.alpha_bars = schedule.alphas_cumprod().to_vec();
    }

    fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid("t", format!("time {t} outside schedule of {}", self.alpha_bars.len())))
    }

    /// The regression target for the head's raw output at noise `eps`, clean `x0`, times `ts`.
    pub fn head_target(&self, x0: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        match self.config.prediction {
            Prediction::Epsilon => Ok(eps.clone()),
            Prediction::V => self.per_item(eps, x0, ts, |ab| (ab.sqrt(), -(1.0 - ab).sqrt())),
        }
    }

    /// `a_i·p + b_i·q` per batch item, with `(a_i, b_i)` computed from `ᾱ` at that item's time.
    fn per_item(&self, p: &Tensor, q: &Tensor, ts: &[usize], coef: impl Fn(f64) -> (f64, f64)) -> Result<Tensor> {
        p.check_same(q)?;
        let n = p.shape()[0];
        if ts.len() != n {
            return Err(Error::Shape(format!("batch {n} with {} times", ts.len())));
        }
        let per = p.len() / n.max(1);
        let mut out = p.clone();
        for (i, (o, qi)) in out.data_mut().chunks_mut(per).zip(q.data().chunks(per)).enumerate() {
            let (a, b) = coef(self.alpha_bar(ts[i])?);
            let (a, b) = (a as f32, b as f32);
            o.iter_mut().zip(qi).for_each(|(o, &q)| *o = a * *o + b * q);
        }
        Ok(out)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tap_ids(&self) -> Vec<TapId> {
        self.config.tap_shapes().into_iter().map(|(t, _)| t).collect()
    }

    /// Single-image convenience wrapper over [`UNetModel::forward_batch`].
    pub fn forward(
        &self,
        latent: &Tensor,
        t: usize,
        cond: Conditioning,
        taps: Option<&TapController>,
    ) -> Result<(Tensor, SkipBundle)> {
        let x =
            if latent.shape().len() == 3 { latent.clone().reshape(prepend1(latent.shape()))? } else { latent.clone() };
        self.forward_batch(&x, &[t], &[cond], taps)
    }

    /// Noise prediction for a batch `[n, C, H, W]` with per-item times and conditions.
    pub fn forward_batch(
        &self,
        latent: &Tensor,
        ts: &[usize],
        conds: &[Conditioning],
        taps: Option<&TapController>,
    ) -> Result<(Tensor, SkipBundle)> {
        let mut g = Graph::new(&self.params);
        let x = g.input(latent.clone());
        let (out, bundle) = self.build(&mut g, x, ts, conds, taps)?;
        let head = g.value(out);
        let eps = match self.config.prediction {
            Prediction::Epsilon => head.clone(),
            // ε = √ᾱ·v + √(1−ᾱ)·x_t
            Prediction::V => self.per_item(head, latent, ts, |ab| (ab.sqrt(), (1.0 - ab).sqrt()))?,
        };
        Ok((eps, bundle))
    }

    /// Records the forward pass on `g`, returning the raw head node (see [`Prediction`]) and recorded taps.
    pub fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        ts: &[usize],
        conds: &[Conditioning],
        taps: Option<&TapController>,
    ) -> Result<(NodeId, SkipBundle)> {
        let cfg = &self.config;
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::Shape(format!(
                "latent {:?} does not match model [{}, {}, {}]",
                g.value(x).shape(),
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        if ts.len() != n || conds.len() != n {
            return Err(Error::Shape(format!("batch {n} with {} times and {} conditions", ts.len(), conds.len())));
        }
        for cond in conds {
            cond.validate(cfg.num_conditions)?;
        }
        let l = &self.layers;
        let default_taps = TapController::new();
        let taps = taps.unwrap_or(&default_taps);
        let mut bundle = SkipBundle::new();

        let temb = g.input(timestep_embedding(ts, cfg.time_embed_dim));
        let temb = l.time_in.forward(g, temb)?;
        let temb = g.silu(temb);
        let temb = l.time_out.forward(g, temb)?;
        let ids: Vec<usize> = conds.iter().map(|c| c.embedding_index(cfg.num_conditions)).collect();
        let cemb = l.cond_embed.forward(g, &ids)?;
        let cemb = l.cond_proj.forward(g, cemb)?;
        let emb = g.add(temb, cemb)?;
        let emb = g.silu(emb);

        let mut skips = Vec::with_capacity(cfg.num_skip_taps());
        let mut hcur = l.stem.forward(g, x)?;
        skips.push(hcur);
        for stage in &l.encoder {
            hcur = match stage {
                EncoderStage::Res(block) => block.forward(g, hcur, emb)?,
                EncoderStage::Down(conv) => conv.forward(g, hcur)?,
            };
            skips.push(hcur);
        }
        for block in &l.mid {
            hcur = block.forward(g, hcur, emb)?;
        }
        hcur = self.apply_tap(g, TapId::H, hcur, taps, &mut bundle)?;

        for stage in &l.decoder {
            let TapId::Skip(idx) = stage.tap else { unreachable!("decoder stages are skip taps") };
            let skip = self.apply_tap(g, stage.tap, skips[idx as usize], taps, &mut bundle)?;
            if let Some(up) = &stage.upsample {
                hcur = g.upsample2x(hcur)?;
                hcur = up.forward(g, hcur)?;
            }
            let cat = g.concat(hcur, skip)?;
            hcur = stage.block.forward(g, cat, emb)?;
        }
        let out = l.out_norm.forward(g, hcur)?;
        let out = g.silu(out);
        let out = l.out_conv.forward(g, out)?;
        Ok((out, bundle))
    }

    fn apply_tap(
        &self,
        g: &mut Graph,
        tap: TapId,
        live: NodeId,
        taps: &TapController,
        bundle: &mut SkipBundle,
    ) -> Result<NodeId> {
        match taps.mode(tap) {
            TapMode::Passthrough => Ok(live),
            TapMode::Record => {
                bundle.insert(tap, g.value(live).clone());
                Ok(live)
            }
            TapMode::Inject(inj) => {
                let live_t = g.value(live);
                let (n, c, h, w) = live_t.dims4()?;
                let fs = inj.feature.shape();
                if fs.len() != 4 || fs[1..] != [c, h, w] || (fs[0] != 1 && fs[0] != n) {
                    return Err(Error::Shape(format!(
                        "injected feature {fs:?} at tap {tap} does not fit native [{n}, {c}, {h}, {w}]"
                    )));
                }
                let mut items = Vec::with_capacity(n);
                for i in 0..n {
                    let inj_item = inj.feature.item(if fs[0] == 1 { 0 } else { i });
                    items.push(blend(&live_t.item(i), &inj_item, inj.gamma, &inj.mask)?);
                }
                let refs: Vec<&Tensor> = items.iter().collect();
                let replaced = Tensor::stack(&refs)?;
                Ok(g.input(replaced))
            }
        }
    }
}

fn prepend1(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// Sinusoidal features of the diffusion time, `[n, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(if i < half { arg.cos() } else { arg.sin() } as f32);
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(cfg: &UNetConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![1, cfg.in_channels, cfg.image_size, cfg.image_size], &mut rng)
    }

    /// Randomises the zero-initialised output layers so injections are visible before training.
    fn perturbed(cfg: &UNetConfig) -> UNetModel {
        let mut m = build_unet(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for t in m.params_mut().values_mut() {
            if t.data().iter().all(|&v| v == 0.0) {
                *t = Tensor::randn(t.shape().to_vec(), &mut rng).scale(0.1);
            }
        }
        m
    }

    #[test]
    fn default_config_has_thirteen_skip_taps_plus_h() {
        let cfg = UNetConfig::default();
        let m = build_unet(&cfg, 0).unwrap();
        let ids = m.tap_ids();
        assert_eq!(ids.len(), 14);
        assert_eq!(ids.iter().filter(|t| matches!(t, TapId::Skip(_))).count(), 13);
        assert_eq!(*ids.last().unwrap(), TapId::H);
    }

    #[test]
    fn two_subblocks_give_nine_skip_taps() {
        let cfg = UNetConfig { subblocks_per_block: 2, ..UNetConfig::default() };
        assert_eq!(cfg.num_skip_taps(), 9);
        assert_eq!(build_unet(&cfg, 0).unwrap().tap_ids().len(), 10);
    }

    #[test]
    fn tap_four_has_second_block_width() {
        let cfg = UNetConfig::default();
        let [c, h, _] = cfg.tap_shape(TapId::Skip(4)).unwrap();
        assert_eq!(c, cfg.block_channels[1]);
        assert_eq!(h, cfg.image_size / 2);
        let [c, h, _] = cfg.tap_shape(TapId::H).unwrap();
        assert_eq!((c, h), (128, 4));
    }

    #[test]
    fn build_rejects_bad_configs() {
        let bad_len = UNetConfig { block_channels: vec![8, 8, 8], ..UNetConfig::smoke() };
        assert!(matches!(build_unet(&bad_len, 0), Err(Error::Config(_))));
        let bad_size = UNetConfig { image_size: 20, ..UNetConfig::smoke() };
        assert!(matches!(build_unet(&bad_size, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = UNetConfig::smoke();
        let a = build_unet(&cfg, 7).unwrap();
        let b = build_unet(&cfg, 7).unwrap();
        let c = build_unet(&cfg, 8).unwrap();
        assert!(a.params().values().iter().zip(b.params().values()).all(|(x, y)| x.bit_eq(y)));
        assert!(!a.params().values().iter().zip(c.params().values()).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn recorded_shapes_match_config() {
        let cfg = UNetConfig::smoke();
        let m = build_unet(&cfg, 0).unwrap();
        let ctrl = TapController::recording(m.tap_ids());
        let (out, bundle) = m.forward(&noise(&cfg, 1), 500, Conditioning::class(3), Some(&ctrl)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 32, 32]);
        assert_eq!(bundle.len(), 14);
        for (tap, [c, h, w]) in cfg.tap_shapes() {
            assert_eq!(bundle[&tap].shape(), &[1, c, h, w], "tap {tap}");
        }
    }

    #[test]
    fn passthrough_controller_equals_no_controller() {
        let cfg = UNetConfig::smoke();
        let m = perturbed(&cfg);
        let x = noise(&cfg, 2);
        let (a, _) = m.forward(&x, 300, Conditioning::class(5), None).unwrap();
        let (b, rec) = m.forward(&x, 300, Conditioning::class(5), Some(&TapController::new())).unwrap();
        assert!(a.bit_eq(&b));
        assert!(rec.is_empty());
    }

    #[test]
    fn self_injection_is_bitwise_identity_for_all_taps() {
        let cfg = UNetConfig::smoke();
        let m = perturbed(&cfg);
        let x = noise(&cfg, 3);
        let cond = Conditioning::class(9);
        let (base, rec) = m.forward(&x, 700, cond, Some(&TapController::recording(m.tap_ids()))).unwrap();
        let mut ctrl = TapController::new();
        for (tap, feat) in rec {
            let c = feat.shape()[1];
            ctrl.set(tap, TapMode::Inject(Injection { feature: feat, gamma: 1.0, mask: vec![true; c] }));
        }
        let (again, _) = m.forward(&x, 700, cond, Some(&ctrl)).unwrap();
        assert!(base.bit_eq(&again));
    }

    #[test]
    fn foreign_injection_changes_output() {
        let cfg = UNetConfig::smoke();
        let m = perturbed(&cfg);
        let x = noise(&cfg, 4);
        let tap = TapId::Skip(4);
        let (_, rec) = m.forward(&x, 500, Conditioning::class(1), Some(&TapController::recording([tap]))).unwrap();
        let (base, _) = m.forward(&x, 500, Conditioning::class(40), None).unwrap();
        let mut ctrl = TapController::new();
        let feat = rec[&tap].clone();
        let c = feat.shape()[1];
        ctrl.set(tap, TapMode::Inject(Injection { feature: feat, gamma: 1.0, mask: vec![true; c] }));
        let (edited, _) = m.forward(&x, 500, Conditioning::class(40), Some(&ctrl)).unwrap();
        assert!(edited.max_abs_diff(&base) > 0.0);
    }

    #[test]
    fn mis_shaped_injection_is_rejected() {
        let cfg = UNetConfig::smoke();
        let m = build_unet(&cfg, 0).unwrap();
        let mut ctrl = TapController::new();
        ctrl.set(
            TapId::Skip(4),
            TapMode::Inject(Injection { feature: Tensor::zeros(vec![1, 3, 5, 5]), gamma: 1.0, mask: vec![true; 3] }),
        );
        let err = m.forward(&noise(&cfg, 5), 10, Conditioning::null(), Some(&ctrl)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn conditioning_out_of_range_is_rejected() {
        let cfg = UNetConfig::smoke();
        let m = build_unet(&cfg, 0).unwrap();
        assert!(m.forward(&noise(&cfg, 6), 10, Conditioning::class(64), None).is_err());
    }

    #[test]
    fn v_head_target_converts_back_to_the_noise() {
        let cfg = UNetConfig::smoke();
        assert_eq!(cfg.prediction, Prediction::V);
        let m = build_unet(&cfg, 0).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let (x0, eps) = (noise(&cfg, 1), noise(&cfg, 2));
        for t in [0, 500, 999] {
            let xt = crate::scheduler::add_noise(&x0, &eps, t, &sched).unwrap();
            let v = m.head_target(&x0, &eps, &[t]).unwrap();
            let back = m.per_item(&v, &xt, &[t], |ab| (ab.sqrt(), (1.0 - ab).sqrt())).unwrap();
            let err = back.data().iter().zip(eps.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-5, "t {t}: {err}");
        }
        let eps_model = build_unet(&UNetConfig { prediction: Prediction::Epsilon, ..cfg }, 0).unwrap();
        assert_eq!(eps_model.head_target(&x0, &eps, &[500]).unwrap(), eps);
    }

    #[test]
    fn tap_id_parses_and_serializes() {
        assert_eq!("h".parse::<TapId>().unwrap(), TapId::H);
        assert_eq!(" 4".parse::<TapId>().unwrap(), TapId::Skip(4));
        assert!("x".parse::<TapId>().is_err());
        let json = serde_json::to_string(&vec![TapId::Skip(4), TapId::H]).unwrap();
        assert_eq!(json, r#"[4,"h"]"#);
        let back: Vec<TapId> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![TapId::Skip(4), TapId::H]);
    }
}
