//! Skip-feature recording and injection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{canonical_json, sha256_hex, Container};
use crate::error::{Error, Result};
use crate::scheduler::{sample, DiffusionSchedule, Injector, SampleOutput, SamplerConfig, StepGrid};
use crate::tensor::Tensor;
use crate::unet::{Conditioning, Injection, SkipBundle, TapController, TapId, TapMode, UNetConfig, UNetModel};

/// Which channels of an injected tap take the blended feature.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ChannelMaskSpec {
    #[default]
    Full,
    /// Every `k`-th channel (0, k, 2k, ...) keeps the original feature.
    Period(u32),
    /// An evenly interleaved fraction `r` of the channels is injected.
    Ratio(f32),
}

impl ChannelMaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ChannelMaskSpec::Period(0) => Err(Error::invalid("plan.mask.param", "period must be a positive integer")),
            ChannelMaskSpec::Ratio(r) if !(0.0..=1.0).contains(&r) => {
                Err(Error::invalid("plan.mask.param", format!("ratio {r} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    variant: String,
    param: Option<f64>,
}

impl Serialize for ChannelMaskSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match *self {
            ChannelMaskSpec::Full => MaskRepr { variant: "full".into(), param: None },
            ChannelMaskSpec::Period(k) => MaskRepr { variant: "period".into(), param: Some(k as f64) },
            ChannelMaskSpec::Ratio(r) => MaskRepr { variant: "ratio".into(), param: Some(r as f64) },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelMaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = MaskRepr::deserialize(d)?;
        match (repr.variant.as_str(), repr.param) {
            ("full", _) => Ok(ChannelMaskSpec::Full),
            ("period", Some(k)) if k >= 0.0 && k.fract() == 0.0 && k <= u32::MAX as f64 => {
                Ok(ChannelMaskSpec::Period(k as u32))
            }
            ("period", _) => Err(D::Error::custom("period mask needs a non-negative integer param")),
            ("ratio", Some(r)) => Ok(ChannelMaskSpec::Ratio(r as f32)),
            ("ratio", None) => Err(D::Error::custom("ratio mask needs a param")),
            (other, _) => Err(D::Error::custom(format!("unknown mask variant {other:?}"))),
        }
    }
}

/// Per-channel selector, `true` meaning "use the injected blend".
pub fn make_channel_mask(depth: usize, spec: ChannelMaskSpec) -> Result<Vec<bool>> {
    if depth == 0 {
        return Err(Error::invalid("depth", "mask depth must be at least 1"));
    }
    spec.validate()?;
    Ok(match spec {
        ChannelMaskSpec::Full => vec![true; depth],
        ChannelMaskSpec::Period(k) => (0..depth).map(|c| c % k as usize != 0).collect(),
        ChannelMaskSpec::Ratio(r) => {
            let r = r as f64;
            (0..depth).map(|c| ((c + 1) as f64 * r).floor() > (c as f64 * r).floor()).collect()
        }
    })
}

/// `f_orig + gamma * (f_inj - f_orig)` on masked channels, `f_orig` elsewhere.
///
/// The endpoints are exact: `gamma == 0` copies `f_orig` and `gamma == 1`
/// copies `f_inj` bit for bit.
pub fn blend(f_orig: &Tensor, f_inj: &Tensor, gamma: f32, mask: &[bool]) -> Result<Tensor> {
    f_orig.check_same(f_inj)?;
    let shape = f_orig.shape();
    if shape.len() < 3 {
        return Err(Error::Shape(format!("blend expects [.., C, H, W], got {shape:?}")));
    }
    let depth = shape[shape.len() - 3];
    if mask.len() != depth {
        return Err(Error::Shape(format!("mask depth {} vs feature depth {depth}", mask.len())));
    }
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut out = f_orig.clone();
    if gamma == 0.0 {
        return Ok(out);
    }
    for (idx, (dst, src)) in out.data_mut().chunks_mut(plane).zip(f_inj.data().chunks(plane)).enumerate() {
        if !mask[idx % depth] {
            continue;
        }
        if gamma == 1.0 {
            dst.copy_from_slice(src);
        } else {
            for (o, &i) in dst.iter_mut().zip(src) {
                *o += gamma * (i - *o);
            }
        }
    }
    Ok(out)
}

/// Inclusive range of diffusion times during which injection is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionWindow {
    pub t_end: usize,
    pub t_start: usize,
}

impl Default for InjectionWindow {
    fn default() -> Self {
        Self { t_end: 400, t_start: 900 }
    }
}

impl InjectionWindow {
    pub fn new(t_end: usize, t_start: usize) -> Self {
        Self { t_end, t_start }
    }

    /// The whole trajectory, `(0, T)`.
    pub fn full(train_steps: usize) -> Self {
        Self { t_end: 0, t_start: train_steps }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.t_end <= t && t <= self.t_start
    }

    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if self.t_end > self.t_start || self.t_start > train_steps {
            return Err(Error::invalid(
                "plan.window",
                format!("need 0 <= t_end <= t_start <= {train_steps}, got ({}, {})", self.t_end, self.t_start),
            ));
        }
        Ok(())
    }
}

impl Serialize for InjectionWindow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.t_end, self.t_start].serialize(s)
    }
}

impl<'de> Deserialize<'de> for InjectionWindow {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [t_end, t_start] = <[usize; 2]>::deserialize(d)?;
        Ok(Self { t_end, t_start })
    }
}

/// Where the target run's starting latent comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    /// One random `z_T` shared by the source and target runs.
    #[default]
    SharedRandom,
    /// The DDIM inversion of the source image under the source condition.
    InvertedA,
    /// The DDIM inversion of the source image under the target condition.
    InvertedB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    pub taps: BTreeSet<TapId>,
    pub window: InjectionWindow,
    pub gamma: f64,
    pub mask: ChannelMaskSpec,
    pub noise_source: NoiseSource,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self {
            taps: [TapId::Skip(4), TapId::Skip(5)].into_iter().collect(),
            window: InjectionWindow::default(),
            gamma: 1.0,
            mask: ChannelMaskSpec::Full,
            noise_source: NoiseSource::SharedRandom,
        }
    }
}

impl InjectionPlan {
    pub fn validate(&self, config: &UNetConfig, train_steps: usize) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::invalid("plan.taps", "at least one tap is required"));
        }
        if let Some(bad) = self.taps.iter().find(|t| !config.has_tap(**t)) {
            return Err(Error::invalid("plan.taps", format!("tap {bad} does not exist in this model")));
        }
        self.window.validate(train_steps)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("plan.gamma", format!("{} must be a finite value >= 0", self.gamma)));
        }
        self.mask.validate()
    }

    pub fn canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }
}

/// Which CFG branches a recording run stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordBranches {
    /// Conditional and unconditional features, injected branch by branch.
    #[default]
    Both,
    /// Conditional features only, injected into both branches.
    Conditional,
}

/// Identifies what a cache was recorded from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub cond: Conditioning,
    pub seed: Option<u64>,
    pub image_id: Option<String>,
}

pub const CACHE_KIND: &str = "feature_cache";

/// Skip features from one source run, keyed by grid step and tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    grid: StepGrid,
    taps: BTreeSet<TapId>,
    branches: RecordBranches,
    source: SourceDescriptor,
    entries: BTreeMap<(usize, TapId), Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    grid: StepGrid,
    taps: BTreeSet<TapId>,
    branches: RecordBranches,
    source: SourceDescriptor,
}

impl FeatureCache {
    pub fn grid(&self) -> &StepGrid {
        &self.grid
    }

    pub fn taps(&self) -> &BTreeSet<TapId> {
        &self.taps
    }

    pub fn source(&self) -> &SourceDescriptor {
        &self.source
    }

    pub fn branches(&self) -> RecordBranches {
        self.branches
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, step: usize, tap: TapId) -> Option<&Tensor> {
        self.entries.get(&(step, tap))
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CacheMeta {
            grid: self.grid.clone(),
            taps: self.taps.clone(),
            branches: self.branches,
            source: self.source.clone(),
        };
        let mut c = Container::new(CACHE_KIND, serde_json::to_value(&meta)?);
        for ((step, tap), t) in &self.entries {
            c.push(format!("{step}/{tap}"), t.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CACHE_KIND {
            return Err(Error::invalid("cache", format!("expected a {CACHE_KIND} container, got {:?}", c.kind)));
        }
        let meta: CacheMeta = serde_json::from_value(c.meta.clone())?;
        let mut entries = BTreeMap::new();
        for (name, t) in &c.tensors {
            let (step, tap) =
                name.split_once('/').ok_or_else(|| Error::invalid("cache", format!("bad entry name {name:?}")))?;
            let step: usize = step.parse().map_err(|_| Error::invalid("cache", format!("bad entry name {name:?}")))?;
            entries.insert((step, tap.parse()?), t.clone());
        }
        Ok(Self { grid: meta.grid, taps: meta.taps, branches: meta.branches, source: meta.source, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Hash of the serialised cache.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_container()?.to_bytes()?))
    }
}

struct Recorder<'a> {
    taps: &'a BTreeSet<TapId>,
    branches: RecordBranches,
    entries: BTreeMap<(usize, TapId), Tensor>,
}

impl Injector for Recorder<'_> {
    fn taps(&mut self, _step: usize, _t: usize) -> Result<TapController> {
        Ok(TapController::recording(self.taps.iter().copied()))
    }

    fn recorded(&mut self, step: usize, _t: usize, bundle: SkipBundle) -> Result<()> {
        for (tap, t) in bundle {
            let t = match self.branches {
                RecordBranches::Conditional => t.item(0),
                RecordBranches::Both => t,
            };
            self.entries.insert((step, tap), t);
        }
        Ok(())
    }
}

/// Samples from `z_t` under `cond_a`, storing `taps` at every grid step.
#[allow(clippy::too_many_arguments)]
pub fn record_run<R: Rng + ?Sized>(
    model: &UNetModel,
    z_t: &Tensor,
    cond_a: Conditioning,
    sampler: &SamplerConfig,
    schedule: &DiffusionSchedule,
    taps: &BTreeSet<TapId>,
    branches: RecordBranches,
    source: SourceDescriptor,
    rng: &mut R,
) -> Result<(SampleOutput, FeatureCache)> {
    if taps.is_empty() {
        return Err(Error::invalid("taps", "at least one tap is required"));
    }
    if let Some(bad) = taps.iter().find(|t| !model.config().has_tap(**t)) {
        return Err(Error::invalid("taps", format!("tap {bad} does not exist in this model")));
    }
    let grid = StepGrid::new(schedule.train_steps(), sampler.num_steps)?;
    let mut rec = Recorder { taps, branches, entries: BTreeMap::new() };
    let out = sample(model, z_t, cond_a, sampler, schedule, Some(&mut rec), rng)?;
    let cache = FeatureCache { grid, taps: taps.clone(), branches, source, entries: rec.entries };
    Ok((out, cache))
}

struct Injecting<'a> {
    cache: &'a FeatureCache,
    plan: &'a InjectionPlan,
    masks: BTreeMap<TapId, Vec<bool>>,
    live_batch: usize,
    fired: Vec<usize>,
}

impl Injector for Injecting<'_> {
    fn taps(&mut self, step: usize, t: usize) -> Result<TapController> {
        let mut ctrl = TapController::new();
        if !self.plan.window.contains(t) {
            return Ok(ctrl);
        }
        for &tap in &self.plan.taps {
            let feat = self.cache.get(step, tap).ok_or_else(|| Error::MissingTap(format!("{tap} at step {step}")))?;
            // A two-branch cache used by an unguided run contributes its conditional half.
            let feature = if feat.shape()[0] > self.live_batch { feat.item(0) } else { feat.clone() };
            let mask = self.masks[&tap].clone();
            ctrl.set(tap, TapMode::Inject(Injection { feature, gamma: self.plan.gamma as f32, mask }));
        }
        self.fired.push(step);
        Ok(ctrl)
    }
}

#[derive(Debug, Clone)]
pub struct InjectOutput {
    pub sample: SampleOutput,
    /// Grid steps at which injection was active.
    pub injected_steps: Vec<usize>,
}

/// Samples from `z_t` under `cond_b`, replacing the plan's taps with blends of
/// the cached features inside the plan's window.
#[allow(clippy::too_many_arguments)]
pub fn inject_run<R: Rng + ?Sized>(
    model: &UNetModel,
    z_t: &Tensor,
    cond_b: Conditioning,
    sampler: &SamplerConfig,
    schedule: &DiffusionSchedule,
    cache: &FeatureCache,
    plan: &InjectionPlan,
    rng: &mut R,
) -> Result<InjectOutput> {
    plan.validate(model.config(), schedule.train_steps())?;
    let grid = StepGrid::new(schedule.train_steps(), sampler.num_steps)?;
    if grid != cache.grid {
        return Err(Error::GridMismatch(format!(
            "cache has {} steps over T={}, run has {} over T={}",
            cache.grid.len(),
            cache.grid.train_steps,
            grid.len(),
            grid.train_steps
        )));
    }
    if let Some(missing) = plan.taps.iter().find(|t| !cache.taps.contains(t)) {
        return Err(Error::MissingTap(missing.to_string()));
    }
    let mut masks = BTreeMap::new();
    for &tap in &plan.taps {
        let [c, _, _] = model.config().tap_shape(tap).expect("validated tap");
        masks.insert(tap, make_channel_mask(c, plan.mask)?);
    }
    let live_batch = if sampler.cfg_scale != 1.0 { 2 } else { 1 };
    let mut inj = Injecting { cache, plan, masks, live_batch, fired: Vec::new() };
    let out = sample(model, z_t, cond_b, sampler, schedule, Some(&mut inj), rng)?;
    Ok(InjectOutput { sample: out, injected_steps: inj.fired })
}
