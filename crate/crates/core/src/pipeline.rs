//! End-to-end editing workflows: generated and real-image edits, style
//! transfer, the ablation sweep and the per-group sweep.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::Classifier;
use crate::container::{canonical_json, sha256_hex};
use crate::error::{Error, Result};
use crate::injection::{
    inject_run, record_run, ChannelMaskSpec, FeatureCache, InjectionPlan, InjectionWindow, NoiseSource, RecordBranches,
    SourceDescriptor,
};
use crate::metrics::{detect_foreground, edit_fidelity, mask_iou, perceptual_proxy, structure_distance, MetricReport};
use crate::montage::{montage, Tile};
use crate::scheduler::{ddim_invert, sample, DiffusionSchedule, SampleOutput, SamplerConfig};
use crate::synthdata::decode_class;
use crate::tensor::Tensor;
use crate::unet::{Conditioning, TapId, UNetModel};

/// A loaded model plus everything a pipeline run needs.
pub struct Engine<'a> {
    pub model: &'a UNetModel,
    pub classifier: Option<&'a Classifier>,
    pub schedule: DiffusionSchedule,
    pub branches: RecordBranches,
    pub checkpoint_hash: String,
}

impl<'a> Engine<'a> {
    pub fn new(ck: &'a Checkpoint) -> Result<Self> {
        Ok(Self {
            model: &ck.unet,
            classifier: ck.classifier.as_ref(),
            schedule: ck.schedule()?,
            branches: RecordBranches::default(),
            checkpoint_hash: ck.hash()?,
        })
    }

    fn classifier(&self) -> Result<&Classifier> {
        self.classifier.ok_or_else(|| Error::Config("checkpoint has no metrics classifier".into()))
    }

    pub fn train_steps(&self) -> usize {
        self.schedule.train_steps()
    }

    /// The seeded starting latent `z_T`, `[1, C, S, S]`.
    pub fn initial_noise(&self, seed: u64) -> Tensor {
        let c = self.model.config();
        Tensor::randn(vec![1, c.in_channels, c.image_size, c.image_size], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Noise stream for stochastic (`eta > 0`) steps; unused by deterministic DDIM.
    fn step_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed)
    }

    pub fn generate(&self, seed: u64, cond: Conditioning, sampler: &SamplerConfig) -> Result<SampleOutput> {
        cond.validate(self.model.config().num_conditions)?;
        sample(self.model, &self.initial_noise(seed), cond, sampler, &self.schedule, None, &mut Self::step_rng(seed))
    }

    /// Samples from a given starting latent, e.g. an inverted one.
    pub fn sample_from(&self, z_t: &Tensor, cond: Conditioning, sampler: &SamplerConfig) -> Result<SampleOutput> {
        cond.validate(self.model.config().num_conditions)?;
        sample(self.model, z_t, cond, sampler, &self.schedule, None, &mut Self::step_rng(0))
    }

    /// DDIM inversion at guidance 1, returning `z_T`.
    pub fn invert(&self, image: &Tensor, cond: Conditioning, num_steps: usize) -> Result<Tensor> {
        let image = self.check_image(image)?;
        let mut traj = ddim_invert(self.model, &image, cond, num_steps, &self.schedule)?;
        Ok(traj.pop().expect("inversion yields at least the input"))
    }

    fn check_image(&self, image: &Tensor) -> Result<Tensor> {
        let c = self.model.config();
        let want = [1, c.in_channels, c.image_size, c.image_size];
        let img = if image.shape().len() == 3 { image.clone().reshape(want.to_vec())? } else { image.clone() };
        if img.shape() != want {
            return Err(Error::invalid(
                "source.image",
                format!("image shape {:?} does not match the model resolution {want:?}", image.shape()),
            ));
        }
        Ok(img)
    }

    fn validate_common(&self, plan: &InjectionPlan, sampler: &SamplerConfig, conds: &[Conditioning]) -> Result<()> {
        plan.validate(self.model.config(), self.train_steps())?;
        sampler.validate(self.train_steps())?;
        for c in conds {
            c.validate(self.model.config().num_conditions)?;
        }
        Ok(())
    }

    /// Records under `cond_a` from `z_src`, then runs baseline and injected
    /// generations under `cond_b` from `z_tgt`.
    #[allow(clippy::too_many_arguments)]
    fn edit_from(
        &self,
        z_src: &Tensor,
        z_tgt: &Tensor,
        cond_a: Conditioning,
        cond_b: Conditioning,
        plan: &InjectionPlan,
        sampler: &SamplerConfig,
        source: SourceDescriptor,
        seed: u64,
    ) -> Result<EditResult> {
        let (src, cache) = record_run(
            self.model,
            z_src,
            cond_a,
            sampler,
            &self.schedule,
            &plan.taps,
            self.branches,
            source,
            &mut Self::step_rng(seed),
        )?;
        let baseline = sample(self.model, z_tgt, cond_b, sampler, &self.schedule, None, &mut Self::step_rng(seed))?;
        let edited =
            inject_run(self.model, z_tgt, cond_b, sampler, &self.schedule, &cache, plan, &mut Self::step_rng(seed))?;
        Ok(EditResult {
            input: None,
            image_a: src.image,
            baseline: baseline.image,
            edited: edited.sample.image,
            injected_steps: edited.injected_steps,
            cache_hash: cache.hash()?,
        })
    }

    pub fn edit_generated(
        &self,
        seed: u64,
        cond_a: Conditioning,
        cond_b: Conditioning,
        plan: &InjectionPlan,
        sampler: &SamplerConfig,
    ) -> Result<EditResult> {
        self.validate_common(plan, sampler, &[cond_a, cond_b])?;
        let z = self.initial_noise(seed);
        let source = SourceDescriptor { cond: cond_a, seed: Some(seed), image_id: None };
        match plan.noise_source {
            NoiseSource::SharedRandom => self.edit_from(&z, &z, cond_a, cond_b, plan, sampler, source, seed),
            inverted => {
                // The target starts from the inversion of the generated source image.
                let a = sample(self.model, &z, cond_a, sampler, &self.schedule, None, &mut Self::step_rng(seed))?;
                let inv_cond = if inverted == NoiseSource::InvertedA { cond_a } else { cond_b };
                let z_tgt = self.invert(&a.image, inv_cond, sampler.num_steps)?;
                self.edit_from(&z, &z_tgt, cond_a, cond_b, plan, sampler, source, seed)
            }
        }
    }

    /// Edits an existing image: it is inverted (under `cond_b` for
    /// `InvertedB`, `cond_a` otherwise) and every run starts from that latent.
    pub fn edit_real(
        &self,
        image: &Tensor,
        image_id: &str,
        cond_a: Conditioning,
        cond_b: Conditioning,
        plan: &InjectionPlan,
        sampler: &SamplerConfig,
    ) -> Result<EditResult> {
        self.validate_common(plan, sampler, &[cond_a, cond_b])?;
        let image = self.check_image(image)?;
        let inv_cond = if plan.noise_source == NoiseSource::InvertedB { cond_b } else { cond_a };
        let z = self.invert(&image, inv_cond, sampler.num_steps)?;
        let source = SourceDescriptor { cond: cond_a, seed: None, image_id: Some(image_id.to_string()) };
        let mut out = self.edit_from(&z, &z, cond_a, cond_b, plan, sampler, source, 0)?;
        out.input = Some(image);
        Ok(out)
    }

    /// Style transfer: the content source is recorded and generation is
    /// driven by `style_cond`. Sources are a seed or an image, as for edits.
    pub fn style_transfer(
        &self,
        content: &StyleContent,
        content_cond: Conditioning,
        style_cond: Conditioning,
        plan: &InjectionPlan,
        sampler: &SamplerConfig,
    ) -> Result<EditResult> {
        match content {
            StyleContent::Seed(seed) => self.edit_generated(*seed, content_cond, style_cond, plan, sampler),
            StyleContent::Image { image, id } => self.edit_real(image, id, content_cond, style_cond, plan, sampler),
        }
    }

    /// Records every tap once, then injects each group with the full window, γ = 1 and a full mask.
    pub fn group_sweep(
        &self,
        seed: u64,
        cond_a: Conditioning,
        cond_b: Conditioning,
        sampler: &SamplerConfig,
        groups: &[Group],
    ) -> Result<GroupSweepResult> {
        sampler.validate(self.train_steps())?;
        cond_a.validate(self.model.config().num_conditions)?;
        cond_b.validate(self.model.config().num_conditions)?;
        let mut group_taps = Vec::new();
        for g in groups {
            let taps = g.taps(self.model);
            if taps.is_empty() {
                return Err(Error::invalid("groups", format!("group {g} contains no taps")));
            }
            group_taps.push((*g, taps));
        }
        let all: BTreeSet<TapId> = group_taps.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let z = self.initial_noise(seed);
        let source = SourceDescriptor { cond: cond_a, seed: Some(seed), image_id: None };
        let (src, cache) = record_run(
            self.model,
            &z,
            cond_a,
            sampler,
            &self.schedule,
            &all,
            self.branches,
            source,
            &mut Self::step_rng(seed),
        )?;
        let baseline = sample(self.model, &z, cond_b, sampler, &self.schedule, None, &mut Self::step_rng(seed))?;
        let mut variants = Vec::new();
        for (g, taps) in group_taps {
            let plan = InjectionPlan {
                taps,
                window: InjectionWindow::full(self.train_steps()),
                gamma: 1.0,
                mask: ChannelMaskSpec::Full,
                noise_source: NoiseSource::SharedRandom,
            };
            let out =
                inject_run(self.model, &z, cond_b, sampler, &self.schedule, &cache, &plan, &mut Self::step_rng(seed))?;
            variants.push((g, out.sample.image));
        }
        Ok(GroupSweepResult { source: src.image, baseline: baseline.image, variants })
    }

    /// Fidelity to `target`, and structure/perceptual distance of `edited` to `reference`.
    pub fn report(
        &self,
        edited: &Tensor,
        reference: &Tensor,
        target: Conditioning,
        fg: Option<(&Tensor, Conditioning)>,
    ) -> Result<MetricReport> {
        let fidelity = match (target.class_id, self.classifier) {
            (Some(c), Some(clf)) => edit_fidelity(clf, edited, c)?,
            _ => f64::NAN,
        };
        let fg_iou = match fg {
            Some((src, Conditioning { class_id: Some(c) })) => {
                let (_, palette, _) = decode_class(c)?;
                Some(mask_iou(&detect_foreground(edited, palette)?, &detect_foreground(src, palette)?)?)
            }
            _ => None,
        };
        Ok(MetricReport {
            fidelity,
            structure_dist: structure_distance(self.model, &self.schedule, edited, reference)?,
            perceptual_dist: perceptual_proxy(edited, reference)?,
            fg_iou,
        })
    }

    /// Runs every point of `grid`. The source is recorded once; each noise
    /// source gets its own baseline, and every row is measured against it.
    pub fn run_sweep(&self, base: &EditRequest, grid: &SweepGrid, workers: usize) -> Result<SweepTable> {
        grid.validate(self.model.config(), self.train_steps())?;
        let classifier = self.classifier()?;
        if !matches!(base.mode, EditMode::EditGenerated | EditMode::StyleTransfer) || base.source.image.is_some() {
            return Err(Error::invalid("mode", "sweeps run from a seeded generated source"));
        }
        let seed = base.source.seed.ok_or_else(|| Error::invalid("source.seed", "required"))?;
        let cond_a = base.source.cond.ok_or_else(|| Error::invalid("source.cond", "required"))?;
        let cond_b = base.target_cond;
        let target_class =
            cond_b.class_id.ok_or_else(|| Error::invalid("target_cond", "sweeps need a target class for fidelity"))?;
        base.sampler.validate(self.train_steps())?;
        cond_a.validate(self.model.config().num_conditions).map_err(|e| rename_field(e, "source.cond"))?;
        cond_b.validate(self.model.config().num_conditions).map_err(|e| rename_field(e, "target_cond"))?;

        let all_taps: BTreeSet<TapId> = grid.taps.iter().flatten().copied().collect();
        let z = self.initial_noise(seed);
        let source = SourceDescriptor { cond: cond_a, seed: Some(seed), image_id: None };
        let (src, cache) = record_run(
            self.model,
            &z,
            cond_a,
            &base.sampler,
            &self.schedule,
            &all_taps,
            self.branches,
            source,
            &mut Self::step_rng(seed),
        )?;
        let mut starts = Vec::new();
        for &ns in &grid.sources {
            let z_tgt = match ns {
                NoiseSource::SharedRandom => z.clone(),
                NoiseSource::InvertedA => self.invert(&src.image, cond_a, base.sampler.num_steps)?,
                NoiseSource::InvertedB => self.invert(&src.image, cond_b, base.sampler.num_steps)?,
            };
            let baseline =
                sample(self.model, &z_tgt, cond_b, &base.sampler, &self.schedule, None, &mut Self::step_rng(seed))?
                    .image;
            starts.push((ns, z_tgt, baseline));
        }

        let points = grid.points();
        let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let work = || loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            let Some(p) = points.get(i) else { break };
            let row = (|| {
                let (_, z_tgt, baseline) =
                    starts.iter().find(|(ns, _, _)| *ns == p.noise_source).expect("every source has a start");
                let plan = InjectionPlan {
                    taps: p.taps.clone(),
                    window: p.window,
                    gamma: p.gamma,
                    mask: p.mask,
                    noise_source: p.noise_source,
                };
                let out = inject_run(
                    self.model,
                    z_tgt,
                    cond_b,
                    &base.sampler,
                    &self.schedule,
                    &cache,
                    &plan,
                    &mut Self::step_rng(seed),
                )?;
                let img = out.sample.image;
                Ok(SweepRow {
                    skip: format_taps(&p.taps),
                    injection_t: format_window(p.window),
                    switch_g: p.gamma,
                    altern: format_mask(p.mask),
                    fidelity: edit_fidelity(classifier, &img, target_class)?,
                    structure_dist: structure_distance(self.model, &self.schedule, &img, baseline)?,
                    perceptual_dist: perceptual_proxy(&img, baseline)?,
                })
            })();
            results.lock().expect("sweep results lock")[i] = Some(row);
        };
        std::thread::scope(|s| {
            for _ in 1..workers.max(1) {
                s.spawn(work);
            }
            work();
        });
        let rows = results
            .into_inner()
            .expect("sweep results lock")
            .into_iter()
            .map(|r| r.expect("every point ran"))
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepTable { checkpoint_hash: self.checkpoint_hash.clone(), grid_hash: grid.hash()?, rows })
    }

    /// Executes a stored request end to end.
    pub fn run_request(&self, req: &EditRequest, load_image: &dyn Fn(&str) -> Result<Tensor>) -> Result<RunOutput> {
        req.validate_shape()?;
        let src = &req.source;
        let cond_b = req.target_cond;
        match req.mode {
            EditMode::GroupSweep => {
                let (seed, cond_a) = (src.seed.unwrap_or_default(), src.cond.unwrap_or_default());
                let res = self.group_sweep(seed, cond_a, cond_b, &req.sampler, &Group::ALL)?;
                let caption = format!(
                    "SEED={seed} A={} B={} STEPS={}",
                    fmt_cond(cond_a),
                    fmt_cond(cond_b),
                    req.sampler.num_steps
                );
                let mut metrics = serde_json::Map::new();
                for (g, img) in &res.variants {
                    let r = self.report(img, &res.baseline, cond_b, Some((&res.source, cond_a)))?;
                    metrics.insert(g.to_string(), serde_json::to_value(r)?);
                }
                let mut images =
                    vec![("image_a".to_string(), res.source.clone()), ("baseline".to_string(), res.baseline.clone())];
                images.extend(res.variants.iter().map(|(g, t)| (format!("group_{g}"), t.clone())));
                Ok(RunOutput {
                    montage: Some(res.montage(&caption)?),
                    images,
                    metrics: serde_json::Value::Object(metrics),
                    injected_steps: Vec::new(),
                })
            }
            mode => {
                let cond_a = src.cond.unwrap_or_default();
                let res = match (&src.image, src.seed) {
                    (Some(id), _) => self.edit_real(&load_image(id)?, id, cond_a, cond_b, &req.plan, &req.sampler)?,
                    (None, Some(seed)) => self.edit_generated(seed, cond_a, cond_b, &req.plan, &req.sampler)?,
                    (None, None) => return Err(Error::invalid("source", "needs an image or a seed")),
                };
                let fg_ref = res.input.as_ref().unwrap_or(&res.image_a);
                let report = self.report(&res.edited, &res.baseline, cond_b, Some((fg_ref, cond_a)))?;
                let mut images = Vec::new();
                if let Some(input) = &res.input {
                    images.push(("input".to_string(), input.clone()));
                }
                images.push(("image_a".to_string(), res.image_a.clone()));
                images.push(("baseline".to_string(), res.baseline.clone()));
                images.push(("edited".to_string(), res.edited.clone()));
                let metrics = serde_json::json!({
                    "mode": mode,
                    "report": report,
                    "injected_steps": res.injected_steps,
                    "cache_hash": res.cache_hash,
                });
                Ok(RunOutput { images, montage: None, metrics, injected_steps: res.injected_steps })
            }
        }
    }
}

fn fmt_cond(c: Conditioning) -> String {
    c.class_id.map_or("NULL".to_string(), |v| v.to_string())
}

/// Where a style transfer takes its content from.
#[derive(Debug, Clone)]
pub enum StyleContent {
    Seed(u64),
    Image { image: Tensor, id: String },
}

#[derive(Debug, Clone)]
pub struct EditResult {
    /// The real input image, for edits of existing images.
    pub input: Option<Tensor>,
    /// Source run output (the reconstruction, for real images).
    pub image_a: Tensor,
    pub baseline: Tensor,
    pub edited: Tensor,
    pub injected_steps: Vec<usize>,
    pub cache_hash: String,
}

/// Everything a request produces, ready to be written out.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub images: Vec<(String, Tensor)>,
    pub montage: Option<RgbImage>,
    pub metrics: serde_json::Value,
    pub injected_steps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    EditGenerated,
    EditReal,
    StyleTransfer,
    GroupSweep,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSource {
    pub seed: Option<u64>,
    pub cond: Option<Conditioning>,
    /// Identifier of an uploaded or on-disk image.
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub mode: EditMode,
    pub source: EditSource,
    pub target_cond: Conditioning,
    #[serde(default)]
    pub plan: InjectionPlan,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub run_id: String,
}

/// Plan defaults for style transfer: γ = 0.65, every 15th channel kept, window (400, 900).
pub fn style_plan() -> InjectionPlan {
    InjectionPlan { gamma: 0.65, mask: ChannelMaskSpec::Period(15), ..InjectionPlan::default() }
}

impl EditRequest {
    /// The documented default request: seed 0, a circle scene (class 0)
    /// edited towards the matching square (class 16), default plan and sampler.
    pub fn canonical_default() -> Self {
        Self::edit_generated(0, 0, 16)
    }

    pub fn edit_generated(seed: u64, cond_a: u32, cond_b: u32) -> Self {
        Self {
            mode: EditMode::EditGenerated,
            source: EditSource { seed: Some(seed), cond: Some(Conditioning::class(cond_a)), image: None },
            target_cond: Conditioning::class(cond_b),
            plan: InjectionPlan::default(),
            sampler: SamplerConfig::default(),
            run_id: String::new(),
        }
    }

    /// Checks that the source fields fit the mode.
    pub fn validate_shape(&self) -> Result<()> {
        let s = &self.source;
        match self.mode {
            EditMode::EditGenerated | EditMode::GroupSweep => {
                if s.seed.is_none() {
                    return Err(Error::invalid("source.seed", "required for generated sources"));
                }
                if s.cond.is_none() {
                    return Err(Error::invalid("source.cond", "required for generated sources"));
                }
                if s.image.is_some() {
                    return Err(Error::invalid("source.image", "not allowed for generated sources"));
                }
            }
            EditMode::EditReal => {
                if s.image.is_none() {
                    return Err(Error::invalid("source.image", "required for real-image edits"));
                }
                if s.cond.is_none() {
                    return Err(Error::invalid(
                        "source.cond",
                        "the class of the input image is required for inversion",
                    ));
                }
            }
            EditMode::StyleTransfer => {
                if s.image.is_none() && s.seed.is_none() {
                    return Err(Error::invalid("source", "needs an image or a seed"));
                }
                if s.cond.is_none() {
                    return Err(Error::invalid("source.cond", "required"));
                }
            }
        }
        if self.run_id.len() > 128 || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::invalid("run_id", "use at most 128 characters from [A-Za-z0-9_-]"));
        }
        Ok(())
    }

    /// Full validation against a model.
    pub fn validate(&self, engine: &Engine) -> Result<()> {
        self.validate_shape()?;
        let n = engine.model.config().num_conditions;
        if let Some(c) = self.source.cond {
            c.validate(n).map_err(|e| rename_field(e, "source.cond"))?;
        }
        self.target_cond.validate(n).map_err(|e| rename_field(e, "target_cond"))?;
        if self.mode != EditMode::GroupSweep {
            self.plan.validate(engine.model.config(), engine.train_steps())?;
        }
        self.sampler.validate(engine.train_steps())
    }

    pub fn canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }
}

fn rename_field(e: Error, field: &str) -> Error {
    match e {
        Error::Invalid { message, .. } => Error::Invalid { field: field.to_string(), message },
        other => other,
    }
}

/// A U-Net tap group: four skip groups counted from the stem, or the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Skip(u8),
    H,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Skip(1), Group::Skip(2), Group::Skip(3), Group::Skip(4), Group::H];

    pub fn taps(&self, model: &UNetModel) -> BTreeSet<TapId> {
        match *self {
            Group::Skip(g) => model.config().group_taps(g as usize).into_iter().collect(),
            Group::H => [TapId::H].into_iter().collect(),
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Group::Skip(g) => write!(f, "{g}"),
            Group::H => f.write_str("h"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupSweepResult {
    pub source: Tensor,
    pub baseline: Tensor,
    pub variants: Vec<(Group, Tensor)>,
}

impl GroupSweepResult {
    /// Source, baseline and one tile per group.
    pub fn montage(&self, caption: &str) -> Result<RgbImage> {
        let mut tiles = vec![
            Tile { label: "SOURCE".into(), image: &self.source },
            Tile { label: "BASE".into(), image: &self.baseline },
        ];
        for (g, img) in &self.variants {
            let label = match g {
                Group::Skip(i) => format!("G{i}"),
                Group::H => "H".to_string(),
            };
            tiles.push(Tile { label, image: img });
        }
        montage(&tiles, 3, caption)
    }
}

/// Axes left out of a submitted grid take their ablation defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub taps: Vec<BTreeSet<TapId>>,
    pub windows: Vec<InjectionWindow>,
    pub gammas: Vec<f64>,
    pub masks: Vec<ChannelMaskSpec>,
    /// Starting latent of the target runs: the seed's noise, or the inversion
    /// of the generated source image. The outermost axis; a grid that leaves
    /// it out sweeps shared noise only.
    #[serde(default = "shared_only")]
    pub sources: Vec<NoiseSource>,
}

fn shared_only() -> Vec<NoiseSource> {
    vec![NoiseSource::SharedRandom]
}

fn default_sources() -> Vec<NoiseSource> {
    vec![NoiseSource::SharedRandom, NoiseSource::InvertedA]
}

impl Default for SweepGrid {
    /// Tap sets {4} and {4,5}; windows (0,1000) and (400,900); γ 1, 0.75, 1.5;
    /// full, period 10, period 20; shared and inverted noise. 72 points.
    fn default() -> Self {
        Self {
            taps: vec![[TapId::Skip(4)].into(), [TapId::Skip(4), TapId::Skip(5)].into()],
            windows: vec![InjectionWindow::new(0, 1000), InjectionWindow::new(400, 900)],
            gammas: vec![1.0, 0.75, 1.5],
            masks: vec![ChannelMaskSpec::Full, ChannelMaskSpec::Period(10), ChannelMaskSpec::Period(20)],
            sources: default_sources(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub taps: BTreeSet<TapId>,
    pub window: InjectionWindow,
    pub gamma: f64,
    pub mask: ChannelMaskSpec,
    pub noise_source: NoiseSource,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.sources.len() * self.taps.len() * self.windows.len() * self.gammas.len() * self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, config: &crate::unet::UNetConfig, train_steps: usize) -> Result<()> {
        for (name, n) in [
            ("grid.taps", self.taps.len()),
            ("grid.windows", self.windows.len()),
            ("grid.gammas", self.gammas.len()),
            ("grid.masks", self.masks.len()),
            ("grid.sources", self.sources.len()),
        ] {
            if n == 0 {
                return Err(Error::invalid(name, "axis is empty"));
            }
        }
        for p in self.points() {
            InjectionPlan {
                taps: p.taps,
                window: p.window,
                gamma: p.gamma,
                mask: p.mask,
                noise_source: p.noise_source,
            }
            .validate(config, train_steps)?;
        }
        Ok(())
    }

    /// Cross product in axis order: noise source, taps, window, gamma, mask.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &noise_source in &self.sources {
            for t in &self.taps {
                for &w in &self.windows {
                    for &g in &self.gammas {
                        for &m in &self.masks {
                            out.push(SweepPoint { taps: t.clone(), window: w, gamma: g, mask: m, noise_source });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(canonical_json(self)?.as_bytes()))
    }
}

pub fn format_taps(taps: &BTreeSet<TapId>) -> String {
    taps.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("+")
}

pub fn format_window(w: InjectionWindow) -> String {
    format!("{}-{}", w.t_end, w.t_start)
}

pub fn format_mask(m: ChannelMaskSpec) -> String {
    match m {
        ChannelMaskSpec::Full => "full".into(),
        ChannelMaskSpec::Period(k) => format!("period:{k}"),
        ChannelMaskSpec::Ratio(r) => format!("ratio:{r}"),
    }
}

/// Inverse of [`format_mask`]; also accepts a bare integer as a period.
pub fn parse_mask(s: &str) -> Result<ChannelMaskSpec> {
    let s = s.trim();
    let bad = || Error::invalid("plan.mask", format!("cannot parse {s:?}; use full, period:K or ratio:R"));
    match s.split_once(':') {
        None if s.eq_ignore_ascii_case("full") => Ok(ChannelMaskSpec::Full),
        None => s.parse().map(ChannelMaskSpec::Period).map_err(|_| bad()),
        Some(("period", k)) => k.trim().parse().map(ChannelMaskSpec::Period).map_err(|_| bad()),
        Some(("ratio", r)) => r.trim().parse().map(ChannelMaskSpec::Ratio).map_err(|_| bad()),
        Some(_) => Err(bad()),
    }
}

/// `"400,900"` or `"400-900"` as `(t_end, t_start)`.
pub fn parse_window(s: &str) -> Result<InjectionWindow> {
    let bad = || Error::invalid("plan.window", format!("cannot parse {s:?}; use T_END,T_START"));
    let (a, b) = s.split_once(',').or_else(|| s.split_once('-')).ok_or_else(bad)?;
    Ok(InjectionWindow::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// `"4,5"` or `"4+5"`; `h` names the bottleneck.
pub fn parse_taps(s: &str) -> Result<BTreeSet<TapId>> {
    s.split([',', '+'])
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.parse())
        .map(|r| r.map_err(|e| rename_field(e, "plan.taps")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub skip: String,
    pub injection_t: String,
    pub switch_g: f64,
    pub altern: String,
    pub fidelity: f64,
    pub structure_dist: f64,
    pub perceptual_dist: f64,
}

pub const SWEEP_COLUMNS: [&str; 7] =
    ["skip", "injection_t", "switch_g", "altern", "fidelity", "structure_dist", "perceptual_dist"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub checkpoint_hash: String,
    pub grid_hash: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::invalid("csv", e.to_string()))?)
            .expect("csv output is UTF-8");
        Ok(format!("# checkpoint={} grid={}\n{body}", self.checkpoint_hash, self.grid_hash))
    }

    /// Parses and schema-checks CSV produced by [`SweepTable::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let (first, rest) = text.split_once('\n').ok_or_else(|| Error::invalid("csv", "missing header line"))?;
        let meta = first.strip_prefix("# ").ok_or_else(|| Error::invalid("csv", "missing metadata line"))?;
        let mut checkpoint_hash = None;
        let mut grid_hash = None;
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("checkpoint", v)) => checkpoint_hash = Some(v.to_string()),
                Some(("grid", v)) => grid_hash = Some(v.to_string()),
                _ => return Err(Error::invalid("csv", format!("unexpected metadata {kv:?}"))),
            }
        }
        let mut r = csv::Reader::from_reader(rest.as_bytes());
        let headers: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if headers != SWEEP_COLUMNS {
            return Err(Error::invalid("csv", format!("columns {headers:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        for row in &rows {
            let finite =
                [row.fidelity, row.structure_dist, row.perceptual_dist, row.switch_g].iter().all(|v| v.is_finite());
            if !finite || !(0.0..=1.0).contains(&row.fidelity) || row.structure_dist < 0.0 || row.perceptual_dist < 0.0
            {
                return Err(Error::invalid("csv", format!("row out of range: {row:?}")));
            }
        }
        Ok(Self {
            checkpoint_hash: checkpoint_hash.ok_or_else(|| Error::invalid("csv", "no checkpoint hash"))?,
            grid_hash: grid_hash.ok_or_else(|| Error::invalid("csv", "no grid hash"))?,
            rows,
        })
    }
}

/// Reuses a cache recorded elsewhere, e.g. one loaded from disk.
pub fn inject_with_cache(
    engine: &Engine,
    z_t: &Tensor,
    cond_b: Conditioning,
    sampler: &SamplerConfig,
    cache: &FeatureCache,
    plan: &InjectionPlan,
) -> Result<Tensor> {
    let out = inject_run(engine.model, z_t, cond_b, sampler, &engine.schedule, cache, plan, &mut Engine::step_rng(0))?;
    Ok(out.sample.image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_72_points_in_axis_order() {
        let g = SweepGrid::default();
        let pts = g.points();
        assert_eq!(pts.len(), 72);
        assert_eq!(format_taps(&pts[0].taps), "4");
        assert_eq!(format_taps(&pts[35].taps), "4+5");
        assert_eq!(pts[36].noise_source, NoiseSource::InvertedA);
        assert_eq!(pts[1].mask, ChannelMaskSpec::Period(10));
        assert_eq!(pts[3].gamma, 0.75);
    }

    #[test]
    fn cell_formats_parse_back() {
        for m in [ChannelMaskSpec::Full, ChannelMaskSpec::Period(10), ChannelMaskSpec::Ratio(0.25)] {
            assert_eq!(parse_mask(&format_mask(m)).unwrap(), m);
        }
        let w = InjectionWindow::new(400, 900);
        assert_eq!(parse_window(&format_window(w)).unwrap(), w);
        assert_eq!(parse_window("400,900").unwrap(), w);
        let t: BTreeSet<TapId> = [TapId::Skip(4), TapId::Skip(5), TapId::H].into();
        assert_eq!(parse_taps(&format_taps(&t)).unwrap(), t);
        assert_eq!(parse_taps("4,5,h").unwrap(), t);
        assert!(parse_mask("period:x").is_err());
        assert!(parse_taps("4,x").is_err());
    }

    #[test]
    fn request_shape_errors_name_fields() {
        let mut r = EditRequest::edit_generated(1, 2, 3);
        assert!(r.validate_shape().is_ok());
        r.source.seed = None;
        let Error::Invalid { field, .. } = r.validate_shape().unwrap_err() else { panic!() };
        assert_eq!(field, "source.seed");
        let mut r = EditRequest::edit_generated(1, 2, 3);
        r.mode = EditMode::EditReal;
        let Error::Invalid { field, .. } = r.validate_shape().unwrap_err() else { panic!() };
        assert_eq!(field, "source.image");
    }

    #[test]
    fn request_json_round_trips() {
        let r = EditRequest::edit_generated(7, 3, 19);
        let json = r.canonical_json().unwrap();
        let back: EditRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<EditRequest>(&json.replace("\"run_id\"", "\"bogus\"")).is_err());
    }

    #[test]
    fn sweep_csv_round_trips() {
        let t = SweepTable {
            checkpoint_hash: "abc".into(),
            grid_hash: "def".into(),
            rows: vec![SweepRow {
                skip: "4+5".into(),
                injection_t: "0-1000".into(),
                switch_g: 1.0,
                altern: "period:10".into(),
                fidelity: 0.5,
                structure_dist: 0.01,
                perceptual_dist: 0.2,
            }],
        };
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with(
            "# checkpoint=abc grid=def\nskip,injection_t,switch_g,altern,fidelity,structure_dist,perceptual_dist\n"
        ));
        assert_eq!(SweepTable::from_csv(&csv).unwrap(), t);
    }
}
