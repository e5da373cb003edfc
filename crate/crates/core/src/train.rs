//! Denoising training for the U-Net and cross-entropy training for the metrics
//! classifier. The U-Net regresses its head target (the noise, or the velocity
//! for `v` models) under plain MSE. Both loops are single-threaded and bitwise
//! reproducible from the seeds in [`TrainConfig`].

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{Adam, Ema};
use crate::scheduler::{add_noise, DiffusionSchedule, ScheduleConfig};
use crate::synthdata::{generate_specs, render_background, BgStyle, SceneSpec, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::unet::{Conditioning, UNetConfig, UNetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub ema_decay: f32,
    pub cond_dropout_prob: f32,
    pub dataset_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    pub classifier_epochs: usize,
    pub classifier_learning_rate: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 32,
            learning_rate: 2e-3,
            ema_decay: 0.999,
            cond_dropout_prob: 0.1,
            dataset_size: 8192,
            seed: 0,
            warmup_steps: 200,
            grad_clip: 1.0,
            classifier_epochs: 12,
            classifier_learning_rate: 5e-3,
        }
    }
}

impl TrainConfig {
    /// A few seconds of work; enough to exercise every code path.
    pub fn smoke() -> Self {
        Self { epochs: 1, batch_size: 16, dataset_size: 64, warmup_steps: 2, classifier_epochs: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::invalid("cond_dropout_prob", format!("{} not in [0, 1)", self.cond_dropout_prob)));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(Error::invalid("batch_size", "batch size and dataset size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", format!("{}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay", format!("{} not in [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of samples trained with the null condition (U-Net phase only).
    pub null_fraction: f64,
    pub seconds: f64,
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Warm-up followed by cosine decay to a tenth of the peak rate.
fn lr_at(step: usize, total: usize, warmup: usize, peak: f32) -> f32 {
    if step < warmup {
        return peak * (step + 1) as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f32 / span as f32).min(1.0);
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * p).cos()))
}

/// Trains the U-Net and the metrics classifier, returning the checkpoint bundle.
pub fn train(
    unet_config: &UNetConfig,
    config: &TrainConfig,
    schedule: ScheduleConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    unet_config.validate()?;
    if unet_config.num_conditions != NUM_CLASSES {
        return Err(Error::Config(format!(
            "synthetic data has {NUM_CLASSES} classes but the model expects {}",
            unet_config.num_conditions
        )));
    }
    let sched = schedule.build()?;
    let specs = generate_specs(config.dataset_size, config.seed);
    let mut log = Vec::new();

    let classifier = train_classifier(
        &ClassifierConfig { image_size: unet_config.image_size, ..Default::default() },
        &specs,
        config,
        |e| {
            progress(e);
            log.push(e.clone());
        },
    )?;

    let mut model = UNetModel::new(unet_config.clone(), config.seed)?;
    model.set_schedule(&sched);
    let mut adam = Adam::new(model.params(), config.grad_clip);
    let mut ema = Ema::new(model.params(), config.ema_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let images: Vec<Tensor> = specs.iter().map(|s| scene_image(s, unet_config.image_size)).collect();
    let steps_per_epoch = specs.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..specs.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nulls, mut seen) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len();
            let x0 = Tensor::stack(&chunk.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
            let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
            let mut ts = Vec::with_capacity(n);
            let mut conds = Vec::with_capacity(n);
            for &i in chunk {
                ts.push(rng.random_range(0..sched.train_steps()));
                if rng.random::<f32>() < config.cond_dropout_prob {
                    conds.push(Conditioning::null());
                    nulls += 1;
                } else {
                    conds.push(specs[i].cond());
                }
            }
            let xt = noisy_batch(&x0, &eps, &ts, &sched)?;
            let target = model.head_target(&x0, &eps, &ts)?;
            let (loss, grads) = {
                let mut g = Graph::new(model.params());
                let x = g.input(xt);
                let (pred, _) = model.build(&mut g, x, &ts, &conds, None)?;
                let l = g.mse(pred, target)?;
                (g.value(l).data()[0], g.backward(l)?)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            adam.step(model.params_mut(), &grads, lr_at(step, total, config.warmup_steps, config.learning_rate));
            ema.update(model.params());
            loss_sum += loss as f64 * n as f64;
            seen += n;
            step += 1;
        }
        let entry = EpochLog {
            phase: "unet".into(),
            epoch,
            loss: loss_sum / seen as f64,
            null_fraction: nulls as f64 / seen as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        tracing::info!(epoch, loss = entry.loss, seconds = entry.seconds, "unet epoch");
        progress(&entry);
        log.push(entry);
    }

    let raw = model.params().clone();
    for (p, s) in model.params_mut().values_mut().iter_mut().zip(ema.shadow()) {
        *p = s.clone();
    }
    let checkpoint = Checkpoint {
        unet: model,
        raw: Some(raw),
        classifier: Some(classifier),
        schedule,
        train_config: Some(config.clone()),
    };
    Ok(TrainOutcome { checkpoint, log })
}

fn scene_image(spec: &SceneSpec, size: usize) -> Tensor {
    crate::synthdata::render_scene_sized(spec, size).image.reshape(vec![1, 3, size, size]).expect("scene shape")
}

/// `add_noise` with a different timestep per batch item.
fn noisy_batch(x0: &Tensor, eps: &Tensor, ts: &[usize], sched: &DiffusionSchedule) -> Result<Tensor> {
    let items: Vec<Tensor> =
        ts.iter().enumerate().map(|(i, &t)| add_noise(&x0.item(i), &eps.item(i), t, sched)).collect::<Result<_>>()?;
    Tensor::stack(&items.iter().collect::<Vec<_>>())?.reshape(x0.shape().to_vec())
}

/// Images with no foreground, trained towards the uniform distribution so the
/// classifier does not commit to a class for foreground-free inputs.
fn negative_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Tensor {
    if rng.random::<bool>() {
        let style = BgStyle::ALL[rng.random_range(0..BgStyle::ALL.len())];
        render_background(style, rng.random(), size).reshape(vec![1, 3, size, size]).expect("background shape")
    } else {
        let col: [f32; 3] = if rng.random::<bool>() {
            let v = rng.random_range(-1.0f32..=1.0);
            [v; 3]
        } else {
            [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
        };
        let plane = size * size;
        let data = (0..3 * plane).map(|i| col[i / plane]).collect();
        Tensor::new(vec![1, 3, size, size], data).expect("negative shape")
    }
}

/// Light noise and per-channel shifts so the classifier tolerates sampler output.
fn augment<R: Rng + ?Sized>(img: &Tensor, rng: &mut R) -> Tensor {
    let sigma = rng.random_range(0.0f32..0.15);
    let shift: [f32; 3] = [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)];
    let noise = Tensor::randn(img.shape().to_vec(), rng);
    let plane = img.len() / 3; // single image, three channels
    let data =
        img.data().iter().zip(noise.data()).enumerate().map(|(i, (&v, &z))| v + shift[i / plane] + sigma * z).collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

pub fn train_classifier(
    cfg: &ClassifierConfig,
    specs: &[SceneSpec],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<Classifier> {
    let mut clf = Classifier::new(cfg.clone(), config.seed.wrapping_add(2))?;
    let mut adam = Adam::new(clf.params(), config.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let batch = 64usize;
    let negatives_per_batch = batch / 8;
    let images: Vec<Tensor> = specs.iter().map(|s| scene_image(s, cfg.image_size)).collect();
    let mut order: Vec<usize> = (0..specs.len()).collect();
    let steps_per_epoch = specs.len().div_ceil(batch - negatives_per_batch);
    let total = steps_per_epoch * config.classifier_epochs;
    let mut step = 0;
    let k = cfg.num_classes;

    for epoch in 0..config.classifier_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(batch - negatives_per_batch) {
            let mut items = Vec::with_capacity(batch);
            let mut targets = Vec::with_capacity(batch * k);
            for &i in chunk {
                items.push(augment(&images[i], &mut rng));
                let mut row = vec![0.0f32; k];
                row[specs[i].class_id() as usize] = 1.0;
                targets.extend(row);
            }
            for _ in 0..negatives_per_batch {
                let neg = negative_image(&mut rng, cfg.image_size);
                items.push(augment(&neg, &mut rng));
                targets.extend(std::iter::repeat_n(1.0 / k as f32, k));
            }
            let n = items.len();
            let x = Tensor::stack(&items.iter().collect::<Vec<_>>())?;
            let targets = Tensor::new(vec![n, k], targets)?;
            let (loss, grads) = {
                let mut g = Graph::new(clf.params());
                let xi = g.input(x);
                let logits = clf.build(&mut g, xi)?;
                let l = g.cross_entropy_soft(logits, targets)?;
                (g.value(l).data()[0], g.backward(l)?)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            adam.step(
                clf.params_mut(),
                &grads,
                lr_at(step, total, 50.min(total / 4 + 1), config.classifier_learning_rate),
            );
            loss_sum += loss as f64;
            batches += 1;
            step += 1;
        }
        let entry = EpochLog {
            phase: "classifier".into(),
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            null_fraction: 0.0,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&entry);
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule_warms_up_then_decays() {
        assert!(lr_at(0, 100, 10, 1.0) < lr_at(9, 100, 10, 1.0));
        assert!((lr_at(9, 100, 10, 1.0) - 1.0).abs() < 1e-6);
        assert!((lr_at(100, 100, 10, 1.0) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_dropout() {
        let c = TrainConfig { cond_dropout_prob: 1.0, ..TrainConfig::smoke() };
        assert!(c.validate().is_err());
    }
}
