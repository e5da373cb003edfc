use std::fmt;
use std::path::Path;

use clap::ValueEnum;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use skipforge_core::checkpoint::Checkpoint;
use skipforge_core::container::{canonical_json, Container};
use skipforge_core::imageio::{encode_png, load_png, save_png};
use skipforge_core::injection::{ChannelMaskSpec, InjectionPlan, NoiseSource};
use skipforge_core::metrics::psnr;
use skipforge_core::montage::{montage, Tile};
use skipforge_core::pipeline::{
    format_mask, format_taps, format_window, parse_mask, parse_taps, parse_window, style_plan, EditMode, EditRequest,
    EditSource, Engine, RunOutput, SweepGrid,
};
use skipforge_core::scheduler::{SamplerConfig, ScheduleConfig};
use skipforge_core::synthdata::{encode_class, BgStyle, FgPalette, Shape};
use skipforge_core::train::{train, write_loss_log, TrainConfig};
use skipforge_core::unet::{Conditioning, UNetConfig};
use skipforge_service::jobs::SweepSubmission;
use skipforge_service::{ServiceConfig, ServiceError};

use crate::*;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or request contents; exit code 2.
    Validation(String),
    /// Anything that went wrong while running; exit code 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<skipforge_core::Error> for CliError {
    fn from(e: skipforge_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Invalid { .. } | ServiceError::Config(_) => CliError::Validation(e.to_string()),
            ServiceError::Core(c) => c.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Request documents for commands that are not edits. Edits store a plain
/// `EditRequest`, sweeps a `{base, grid}` submission.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum CliRecord {
    Generate { seed: u64, cond: Conditioning, sampler: SamplerConfig },
    Invert { image: String, cond: Conditioning, num_steps: usize },
    ExportFigures { kind: String, request: EditRequest },
    Train { unet_config: UNetConfig, train_config: TrainConfig },
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Edit(a) => cmd_edit(a, false),
        Command::Style(a) => cmd_edit(a, true),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GroupSweep(a) => cmd_group_sweep(a),
        Command::Serve(a) => cmd_serve(a),
        Command::ExportFigures(a) => cmd_export(a),
    }
}

/// A class id, `null`, or `shape/palette/background` names.
fn parse_cond(s: &str) -> Result<Conditioning> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("null") || s.eq_ignore_ascii_case("none") {
        return Ok(Conditioning::null());
    }
    if let Ok(id) = s.parse::<u32>() {
        return Ok(Conditioning::class(id));
    }
    let parts: Vec<&str> = s.split('/').collect();
    let [shape, fg, bg] = parts[..] else {
        return Err(invalid(format!("condition {s:?}: use a class id, null, or shape/palette/background")));
    };
    let named = |v: &str| Value::String(v.to_string());
    let shape: Shape = serde_json::from_value(named(shape)).map_err(|_| invalid(format!("unknown shape {shape:?}")))?;
    let fg: FgPalette = serde_json::from_value(named(fg)).map_err(|_| invalid(format!("unknown palette {fg:?}")))?;
    let bg: BgStyle = serde_json::from_value(named(bg)).map_err(|_| invalid(format!("unknown background {bg:?}")))?;
    Ok(Conditioning::class(encode_class(shape, fg, bg)))
}

fn sampler_config(a: &SamplerArgs) -> SamplerConfig {
    SamplerConfig { num_steps: a.steps, cfg_scale: a.cfg, eta: a.eta }
}

fn build_plan(mut plan: InjectionPlan, a: &PlanArgs) -> Result<InjectionPlan> {
    if let Some(t) = &a.taps {
        plan.taps = parse_taps(t)?;
    }
    if let Some(w) = &a.window {
        plan.window = parse_window(w)?;
    }
    if let Some(g) = a.gamma {
        plan.gamma = g;
    }
    if let Some(k) = a.altern {
        plan.mask = ChannelMaskSpec::Period(k);
    }
    if let Some(r) = a.ratio {
        plan.mask = ChannelMaskSpec::Ratio(r);
    }
    if let Some(n) = a.noise_source {
        plan.noise_source = match n {
            NoiseSourceArg::SharedRandom => NoiseSource::SharedRandom,
            NoiseSourceArg::InvertedA => NoiseSource::InvertedA,
            NoiseSourceArg::InvertedB => NoiseSource::InvertedB,
        };
    }
    Ok(plan)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "checkpoint {} not found (train one with `skipforge train` or pass --checkpoint)",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_request(dir: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(dir.join("request.json"), canonical_json(value)? + "\n")?;
    Ok(())
}

fn image_loader(id: &str) -> skipforge_core::Result<skipforge_core::Tensor> {
    load_png(Path::new(id))
}

fn absolute(p: &Path) -> Result<String> {
    let abs = std::fs::canonicalize(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    Ok(abs.to_string_lossy().into_owned())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (unet, mut cfg) = match a.preset {
        Preset::Desk => (UNetConfig::desk(), TrainConfig::default()),
        Preset::Smoke => (UNetConfig::smoke(), TrainConfig::smoke()),
    };
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)?;
        cfg = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.dataset_size = a.dataset_size.unwrap_or(cfg.dataset_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;

    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    prepare_out(if dir.as_os_str().is_empty() { Path::new(".") } else { &dir })?;
    let log_path = a.log.clone().unwrap_or_else(|| dir.join(format!("{stem}_train_log.csv")));
    let outcome = train(&unet, &cfg, ScheduleConfig::default(), |e| {
        eprintln!(
            "{:>10} epoch {:>3}  loss {:.5}  null {:.3}  {:.1}s",
            e.phase, e.epoch, e.loss, e.null_fraction, e.seconds
        );
    })?;
    outcome.checkpoint.save(&a.out)?;
    write_loss_log(&log_path, &outcome.log)?;
    let record = CliRecord::Train { unet_config: unet, train_config: cfg };
    std::fs::write(dir.join(format!("{stem}.request.json")), canonical_json(&record)? + "\n")?;
    println!("{} {}", a.out.display(), outcome.checkpoint.hash()?);
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let record = CliRecord::Generate { seed: a.seed, cond: parse_cond(&a.cond)?, sampler: sampler_config(&a.sampler) };
    let ck = load_checkpoint(&a.checkpoint.checkpoint)?;
    run_record(&Engine::new(&ck)?, &record, &a.out.out)
}

fn cmd_invert(a: InvertArgs) -> Result<()> {
    let record = CliRecord::Invert { image: absolute(&a.image)?, cond: parse_cond(&a.cond)?, num_steps: a.steps };
    let ck = load_checkpoint(&a.checkpoint.checkpoint)?;
    run_record(&Engine::new(&ck)?, &record, &a.out.out)
}

fn run_record(engine: &Engine, record: &CliRecord, out: &Path) -> Result<()> {
    match record {
        CliRecord::Generate { seed, cond, sampler } => {
            sampler.validate(engine.train_steps())?;
            let img = engine.generate(*seed, *cond, sampler)?.image;
            prepare_out(out)?;
            save_png(&img, &out.join("image.png"))?;
            write_json(&out.join("metrics.json"), &json!({ "checkpoint_hash": engine.checkpoint_hash }))?;
        }
        CliRecord::Invert { image, cond, num_steps } => {
            cond.validate(engine.model.config().num_conditions)?;
            let x = load_png(Path::new(image))?;
            let z = engine.invert(&x, *cond, *num_steps)?;
            let sampler = SamplerConfig { num_steps: *num_steps, cfg_scale: 1.0, eta: 0.0 };
            let recon = engine.sample_from(&z, *cond, &sampler)?.image;
            prepare_out(out)?;
            let mut c = Container::new(
                "latent",
                json!({ "cond": cond, "num_steps": num_steps, "checkpoint_hash": engine.checkpoint_hash }),
            );
            c.push("z_t", z);
            c.write(&out.join("latent.skf"))?;
            save_png(&recon, &out.join("reconstruction.png"))?;
            let p = psnr(&x, &recon)?;
            write_json(&out.join("metrics.json"), &json!({ "psnr_db": p, "checkpoint_hash": engine.checkpoint_hash }))?;
            println!("reconstruction PSNR {p:.2} dB");
        }
        CliRecord::ExportFigures { kind, request } => {
            let kind = FigureKind::from_str(kind, true).map_err(|e| invalid(format!("figure kind: {e}")))?;
            export(engine, kind, request, out)?;
        }
        CliRecord::Train { .. } => {
            return Err(invalid("training requests are replayed with `skipforge train --config`"))
        }
    }
    write_request(out, record)
}

fn cmd_edit(a: EditArgs, style: bool) -> Result<()> {
    if let Some(path) = &a.from_request {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let ck = load_checkpoint(&a.checkpoint.checkpoint)?;
        return replay(&Engine::new(&ck)?, &text, &a.out.out);
    }
    let cond_a = parse_cond(a.cond_a.as_deref().unwrap_or_default())?;
    let cond_b = parse_cond(a.cond_b.as_deref().unwrap_or_default())?;
    let (mode, source) = match &a.image {
        Some(img) => (
            if style { EditMode::StyleTransfer } else { EditMode::EditReal },
            EditSource { seed: None, cond: Some(cond_a), image: Some(absolute(img)?) },
        ),
        None => (
            if style { EditMode::StyleTransfer } else { EditMode::EditGenerated },
            EditSource { seed: Some(a.seed), cond: Some(cond_a), image: None },
        ),
    };
    let base = if style { style_plan() } else { InjectionPlan::default() };
    let req = EditRequest {
        mode,
        source,
        target_cond: cond_b,
        plan: build_plan(base, &a.plan)?,
        sampler: sampler_config(&a.sampler),
        run_id: String::new(),
    };
    let ck = load_checkpoint(&a.checkpoint.checkpoint)?;
    run_edit(&Engine::new(&ck)?, &req, &a.out.out)
}

/// Re-runs any request document this tool writes.
fn replay(engine: &Engine, text: &str, out: &Path) -> Result<()> {
    let value: Value = serde_json::from_str(text).map_err(|e| invalid(format!("request: {e}")))?;
    if value.get("command").is_some() {
        let record: CliRecord = serde_json::from_value(value).map_err(|e| invalid(format!("request: {e}")))?;
        return run_record(engine, &record, out);
    }
    if value.get("grid").is_some() {
        let sub: SweepSubmission = serde_json::from_value(value).map_err(|e| invalid(format!("request: {e}")))?;
        return run_sweep(engine, &sub, 1, out);
    }
    let req: EditRequest = serde_json::from_value(value).map_err(|e| invalid(format!("request: {e}")))?;
    run_edit(engine, &req, out)
}

fn run_edit(engine: &Engine, req: &EditRequest, out: &Path) -> Result<()> {
    req.validate(engine)?;
    let result = engine.run_request(req, &image_loader)?;
    prepare_out(out)?;
    write_outputs(engine, &result, out)?;
    write_request(out, req)
}

fn write_outputs(engine: &Engine, result: &RunOutput, out: &Path) -> Result<()> {
    for (name, img) in &result.images {
        save_png(img, &out.join(format!("{name}.png")))?;
    }
    if let Some(m) = &result.montage {
        std::fs::write(out.join("montage.png"), encode_png(m)?)?;
    }
    let mut metrics = result.metrics.clone();
    metrics["checkpoint_hash"] = json!(engine.checkpoint_hash);
    write_json(&out.join("metrics.json"), &metrics)
}

fn split_axis<T>(s: &str, seps: &[char], parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(seps).map(str::trim).filter(|p| !p.is_empty()).map(parse).collect()
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut base = EditRequest::canonical_default();
    base.source = EditSource { seed: Some(a.seed), cond: Some(parse_cond(&a.cond_a)?), image: None };
    base.target_cond = parse_cond(&a.cond_b)?;
    base.sampler = sampler_config(&a.sampler);
    let any_axis = a.sweep_taps.is_some()
        || a.sweep_windows.is_some()
        || a.sweep_gammas.is_some()
        || a.sweep_masks.is_some()
        || a.sweep_sources.is_some();
    let grid = if let Some(path) = &a.grid {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
    } else if any_axis {
        // Axes not given collapse to the base plan's single value.
        let p = &base.plan;
        SweepGrid {
            taps: a
                .sweep_taps
                .as_deref()
                .map_or(Ok(vec![p.taps.clone()]), |s| split_axis(s, &[';'], |t| Ok(parse_taps(t)?)))?,
            windows: a
                .sweep_windows
                .as_deref()
                .map_or(Ok(vec![p.window]), |s| split_axis(s, &[';'], |w| Ok(parse_window(w)?)))?,
            gammas: a.sweep_gammas.as_deref().map_or(Ok(vec![p.gamma]), |s| {
                split_axis(s, &[';', ','], |g| g.parse().map_err(|_| invalid(format!("gamma {g:?}"))))
            })?,
            masks: a
                .sweep_masks
                .as_deref()
                .map_or(Ok(vec![p.mask]), |s| split_axis(s, &[';'], |m| Ok(parse_mask(m)?)))?,
            sources: a.sweep_sources.as_deref().map_or(Ok(vec![p.noise_source]), |s| {
                split_axis(s, &[';', ','], |n| {
                    serde_json::from_value(Value::String(n.replace('-', "_")))
                        .map_err(|_| invalid(format!("noise source {n:?}")))
                })
            })?,
        }
    } else {
        SweepGrid::default()
    };
    let ck = load_checkpoint(&a.checkpoint.checkpoint)?;
    run_sweep(&Engine::new(&ck)?, &SweepSubmission { base, grid }, a.workers, &a.out.out)
}

fn run_sweep(engine: &Engine, sub: &SweepSubmission, workers: usize, out: &Path) -> Result<()> {
    let table = engine.run_sweep(&sub.base, &sub.grid, workers)?;
    prepare_out(out)?;
    std::fs::write(out.join("results.csv"), table.to_csv()?)?;
    write_request(out, sub)?;
    println!("{} rows -> {}", table.rows.len(), out.join("results.csv").display());
    Ok(())
}

fn group_request(seed: u64, cond_a: &str, cond_b: &str, sampler: &SamplerArgs) -> Result<EditRequest> {
    Ok(EditRequest {
        mode: EditMode::GroupSweep,
        source: EditSource { seed: Some(seed), cond: Some(parse_cond(cond_a)?), image: None },
        target_cond: parse_cond(cond_b)?,
        plan: InjectionPlan::default(),
        sampler: sampler_config(sampler),
        run_id: String::new(),
    })
}

fn cmd_group_sweep(a: GroupSweepArgs) -> Result<()> {
    let req = group_request(a.seed, &a.cond_a, &a.cond_b, &a.sampler)?;
    let ck = load_checkpoint(&a.checkpoint.checkpoint)?;
    run_edit(&Engine::new(&ck)?, &req, &a.out.out)
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::load(a.config.as_deref())?;
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(p) = a.store_root {
        cfg.store_root = p;
    }
    if let Some(p) = a.checkpoint_dir {
        cfg.checkpoint_dir = p;
    }
    if let Some(p) = a.static_dir {
        cfg.static_dir = Some(p);
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(skipforge_service::serve(cfg))?;
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let request = match a.kind {
        FigureKind::GroupSweep => group_request(a.seed, &a.cond_a, &a.cond_b, &a.sampler)?,
        FigureKind::Edit | FigureKind::Gamma => EditRequest {
            mode: EditMode::EditGenerated,
            source: EditSource { seed: Some(a.seed), cond: Some(parse_cond(&a.cond_a)?), image: None },
            target_cond: parse_cond(&a.cond_b)?,
            plan: build_plan(InjectionPlan::default(), &a.plan)?,
            sampler: sampler_config(&a.sampler),
            run_id: String::new(),
        },
    };
    let kind = a.kind.to_possible_value().expect("figure kinds are named").get_name().to_string();
    let ck = load_checkpoint(&a.checkpoint.checkpoint)?;
    run_record(&Engine::new(&ck)?, &CliRecord::ExportFigures { kind, request }, &a.out.out)
}

fn caption(req: &EditRequest) -> String {
    let cond = |c: Option<Conditioning>| c.and_then(|c| c.class_id).map_or("NULL".into(), |v| v.to_string());
    format!(
        "SEED={} A={} B={} TAPS={} T={} G={} M={} STEPS={}",
        req.source.seed.unwrap_or_default(),
        cond(req.source.cond),
        cond(Some(req.target_cond)),
        format_taps(&req.plan.taps),
        format_window(req.plan.window),
        req.plan.gamma,
        format_mask(req.plan.mask),
        req.sampler.num_steps
    )
}

fn export(engine: &Engine, kind: FigureKind, req: &EditRequest, out: &Path) -> Result<()> {
    req.validate(engine)?;
    prepare_out(out)?;
    let seed = req.source.seed.unwrap_or_default();
    let cond_a = req.source.cond.unwrap_or_default();
    let (name, image) = match kind {
        FigureKind::GroupSweep => {
            let run = engine.run_request(req, &image_loader)?;
            ("group_sweep.png", run.montage.ok_or_else(|| CliError::Runtime("group sweep produced no montage".into()))?)
        }
        FigureKind::Edit => {
            let r = engine.edit_generated(seed, cond_a, req.target_cond, &req.plan, &req.sampler)?;
            let tiles = [
                Tile { label: "SOURCE".into(), image: &r.image_a },
                Tile { label: "BASE".into(), image: &r.baseline },
                Tile { label: "EDIT".into(), image: &r.edited },
            ];
            ("edit.png", montage(&tiles, 3, &caption(req))?)
        }
        FigureKind::Gamma => {
            let gammas = [0.0, 0.25, 0.5, 0.75, 1.0];
            let mut images = Vec::new();
            for g in gammas {
                let plan = InjectionPlan { gamma: g, ..req.plan.clone() };
                images.push(engine.edit_generated(seed, cond_a, req.target_cond, &plan, &req.sampler)?.edited);
            }
            let tiles: Vec<Tile> =
                gammas.iter().zip(&images).map(|(g, img)| Tile { label: format!("G={g}"), image: img }).collect();
            ("gamma.png", montage(&tiles, 3, &caption(req))?)
        }
    };
    std::fs::write(out.join(name), encode_png(&image)?)?;
    println!("{}", out.join(name).display());
    Ok(())
}
