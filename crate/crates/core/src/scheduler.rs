//! Noise schedule, deterministic DDIM sampling and inversion, classifier-free guidance.
//!
//! Diffusion times are schedule indices `0..T`. A step that lands on the clean
//! image is expressed as `t_prev = None`, for which `alpha_bar = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{Conditioning, SkipBundle, TapController, UNetModel};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: DEFAULT_TRAIN_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        linear_beta_schedule(self.train_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

/// Betas spaced linearly from `beta_start` to `beta_end` over `train_steps` times.
pub fn linear_beta_schedule(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if train_steps == 0 {
        return Err(Error::invalid("train_steps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "betas",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"),
        ));
    }
    let betas: Vec<f64> = if train_steps == 1 {
        vec![beta_start]
    } else {
        (0..train_steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64).collect()
    };
    let mut acc = 1.0;
    let alphas_cumprod = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(DiffusionSchedule { betas, alphas_cumprod })
}

impl DiffusionSchedule {
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `alpha_bar` at `t`, with `None` meaning the clean image.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => self
                .alphas_cumprod
                .get(t)
                .copied()
                .ok_or_else(|| Error::invalid("t", format!("time {t} outside schedule of {}", self.train_steps()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_scale: f32,
    pub eta: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 50, cfg_scale: 7.5, eta: 0.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > train_steps {
            return Err(Error::invalid("sampler.num_steps", format!("{} outside [1, {train_steps}]", self.num_steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid("sampler.eta", format!("{} outside [0, 1]", self.eta)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::invalid("sampler.cfg_scale", "must be finite"));
        }
        Ok(())
    }
}

/// Descending diffusion times visited by a sampler: `t_i = round(i * T / N) - 1` for `i = N..1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    pub train_steps: usize,
    pub times: Vec<usize>,
}

impl StepGrid {
    pub fn new(train_steps: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > train_steps {
            return Err(Error::invalid("num_steps", format!("{num_steps} outside [1, {train_steps}]")));
        }
        let times = (1..=num_steps)
            .rev()
            .map(|i| ((i as f64 * train_steps as f64 / num_steps as f64).round() as usize) - 1)
            .collect();
        Ok(Self { train_steps, times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The time step `i` lands on (`None` after the last step).
    pub fn prev(&self, i: usize) -> Option<usize> {
        self.times.get(i + 1).copied()
    }
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(Some(t))?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// `uncond + scale * (cond - uncond)`, returning the exact input at scale 0 or 1.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, scale: f32) -> Result<Tensor> {
    uncond.check_same(cond)?;
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    uncond.zip_map(cond, |u, c| u + scale * (c - u))
}

/// One DDIM update from `t` to `t_prev`. With `eta == 0` the rng is not touched.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    noise_pred: &Tensor,
    x_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &DiffusionSchedule,
    eta: f32,
    rng: &mut R,
) -> Result<Tensor> {
    noise_pred.check_same(x_t)?;
    if t_prev == Some(t) {
        return Ok(x_t.clone());
    }
    if matches!(t_prev, Some(p) if p > t) {
        return Err(Error::invalid("t_prev", format!("step must go down in time, got {t} -> {t_prev:?}")));
    }
    let a_t = schedule.alpha_bar(Some(t))?;
    let a_p = schedule.alpha_bar(t_prev)?;
    let sigma = eta as f64 * ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).max(0.0).sqrt();
    let dir = (1.0 - a_p - sigma * sigma).max(0.0).sqrt();
    let (sa_t, sb_t, sa_p) = (a_t.sqrt(), (1.0 - a_t).sqrt(), a_p.sqrt());
    let mut out = x_t.zip_map(noise_pred, |x, e| {
        let x0 = (x as f64 - sb_t * e as f64) / sa_t;
        (sa_p * x0 + dir * e as f64) as f32
    })?;
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    Ok(out)
}

/// The reverse of an `eta = 0` DDIM step: moves `x_s` up from `s` to `t` using a noise
/// prediction made at `t`.
pub fn ddim_inverse_step(
    noise_pred: &Tensor,
    x_s: &Tensor,
    s: Option<usize>,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let a_s = schedule.alpha_bar(s)?;
    let a_t = schedule.alpha_bar(Some(t))?;
    let (sa_s, sb_s, sa_t, sb_t) = (a_s.sqrt(), (1.0 - a_s).sqrt(), a_t.sqrt(), (1.0 - a_t).sqrt());
    x_s.zip_map(noise_pred, |x, e| {
        let x0 = (x as f64 - sb_s * e as f64) / sa_s;
        (sa_t * x0 + sb_t * e as f64) as f32
    })
}

/// Anything that predicts noise for a batch sharing one diffusion time.
pub trait Denoiser {
    fn predict(
        &self,
        x: &Tensor,
        t: usize,
        conds: &[Conditioning],
        taps: Option<&TapController>,
    ) -> Result<(Tensor, SkipBundle)>;
}

impl Denoiser for UNetModel {
    fn predict(
        &self,
        x: &Tensor,
        t: usize,
        conds: &[Conditioning],
        taps: Option<&TapController>,
    ) -> Result<(Tensor, SkipBundle)> {
        self.forward_batch(x, &vec![t; conds.len()], conds, taps)
    }
}

/// Per-step hook into [`sample`]: chooses tap modes and receives recorded features.
///
/// Forward passes are batched as `[conditional, unconditional]` when CFG is
/// active and `[conditional]` otherwise; recorded tensors keep that layout.
pub trait Injector {
    fn taps(&mut self, step: usize, t: usize) -> Result<TapController>;

    fn recorded(&mut self, _step: usize, _t: usize, _bundle: SkipBundle) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: Tensor,
    /// Latents from `z_T` through the final image, `num_steps + 1` entries.
    pub trajectory: Vec<Tensor>,
}

/// Runs the full DDIM grid from `z_t` (`[1, C, H, W]`) under `cond`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    z_t: &Tensor,
    cond: Conditioning,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    mut injector: Option<&mut dyn Injector>,
    rng: &mut R,
) -> Result<SampleOutput> {
    config.validate(schedule.train_steps())?;
    let grid = StepGrid::new(schedule.train_steps(), config.num_steps)?;
    let guided = config.cfg_scale != 1.0;
    let mut x = z_t.clone();
    let mut trajectory = Vec::with_capacity(grid.len() + 1);
    trajectory.push(x.clone());
    for (i, &t) in grid.times.iter().enumerate() {
        let ctrl = match injector.as_deref_mut() {
            Some(inj) => Some(inj.taps(i, t)?),
            None => None,
        };
        let (batch, conds) = if guided {
            (Tensor::stack(&[&x, &x])?, vec![cond, Conditioning::null()])
        } else {
            (x.clone(), vec![cond])
        };
        let (pred, bundle) = model.predict(&batch, t, &conds, ctrl.as_ref())?;
        if let Some(inj) = injector.as_deref_mut() {
            inj.recorded(i, t, bundle)?;
        }
        let eps = if guided { cfg_combine(&pred.item(1), &pred.item(0), config.cfg_scale)? } else { pred };
        x = ddim_step(&eps, &x, t, grid.prev(i), schedule, config.eta, rng)?;
        trajectory.push(x.clone());
    }
    Ok(SampleOutput { image: x, trajectory })
}

/// Deterministic DDIM inversion at guidance 1: returns latents from `x0` up to `z_T`.
pub fn ddim_invert<D: Denoiser + ?Sized>(
    model: &D,
    x0: &Tensor,
    cond: Conditioning,
    num_steps: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<Tensor>> {
    let grid = StepGrid::new(schedule.train_steps(), num_steps)?;
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(num_steps + 1);
    out.push(x.clone());
    let mut s = None;
    for &t in grid.times.iter().rev() {
        let (eps, _) = model.predict(&x, t, &[cond], None)?;
        x = ddim_inverse_step(&eps, &x, s, t, schedule)?;
        out.push(x.clone());
        s = Some(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> DiffusionSchedule {
        linear_beta_schedule(1000, 1e-4, 0.02).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_schedule_is_strictly_decreasing_and_starts_near_one() {
        let s = sched();
        let ac = s.alphas_cumprod();
        assert_eq!(ac.len(), 1000);
        assert!((ac[0] - 0.9999).abs() < 1e-12);
        assert!(ac.windows(2).all(|w| w[1] < w[0]));
        assert!(ac.iter().all(|&a| a > 0.0 && a <= 1.0));
        let mut prod = 1.0;
        for (i, b) in s.betas().iter().enumerate() {
            prod *= 1.0 - b;
            assert!((prod - ac[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_entry_schedule() {
        let s = linear_beta_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alphas_cumprod().len(), 1);
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(linear_beta_schedule(1000, 0.02, 1e-4).is_err());
        assert!(linear_beta_schedule(1000, 0.0, 0.02).is_err());
        assert!(linear_beta_schedule(1000, 1e-4, 1.0).is_err());
    }

    #[test]
    fn add_noise_endpoints() {
        let s = sched();
        let x0 = rand(&[1, 3, 4, 4], 1);
        let zero = Tensor::zeros(vec![1, 3, 4, 4]);
        let ab = s.alphas_cumprod()[0].sqrt();
        let xt = add_noise(&x0, &zero, 0, &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*a, (ab * *b as f64) as f32);
        }
        let ones = Tensor::full(vec![1, 3, 4, 4], 1.0);
        let xt = add_noise(&zero, &ones, 999, &s).unwrap();
        let want = (1.0 - s.alphas_cumprod()[999]).sqrt() as f32;
        assert!(xt.data().iter().all(|&v| v == want));
    }

    #[test]
    fn cfg_combine_cases() {
        let u = Tensor::full(vec![2], 1.0);
        let c = Tensor::full(vec![2], 3.0);
        assert!(cfg_combine(&u, &c, 1.0).unwrap().bit_eq(&c));
        assert!(cfg_combine(&u, &c, 0.0).unwrap().bit_eq(&u));
        assert_eq!(cfg_combine(&u, &c, 7.5).unwrap().data(), &[16.0, 16.0]);
    }

    #[test]
    fn grid_is_descending_and_in_range() {
        let g = StepGrid::new(1000, 50).unwrap();
        assert_eq!(g.times.len(), 50);
        assert_eq!(g.times[0], 999);
        assert_eq!(*g.times.last().unwrap(), 19);
        assert!(g.times.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(StepGrid::new(1000, 1).unwrap().times, vec![999]);
        let full = StepGrid::new(1000, 1000).unwrap();
        assert_eq!(full.times[999], 0);
        assert!(StepGrid::new(1000, 0).is_err());
        assert!(StepGrid::new(1000, 1001).is_err());
    }

    #[test]
    fn ddim_step_identity_and_ordering() {
        let s = sched();
        let x = rand(&[1, 3, 2, 2], 2);
        let e = rand(&[1, 3, 2, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ddim_step(&e, &x, 500, Some(500), &s, 0.0, &mut rng).unwrap().bit_eq(&x));
        assert!(ddim_step(&e, &x, 500, Some(600), &s, 0.0, &mut rng).is_err());
        let a = ddim_step(&e, &x, 500, Some(480), &s, 0.0, &mut rng).unwrap();
        let b = ddim_step(&e, &x, 500, Some(480), &s, 0.0, &mut rng).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn inverse_step_undoes_forward_step_for_constant_prediction() {
        let s = sched();
        let x = rand(&[1, 3, 2, 2], 4);
        let e = rand(&[1, 3, 2, 2], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let down = ddim_step(&e, &x, 700, Some(300), &s, 0.0, &mut rng).unwrap();
        let up = ddim_inverse_step(&e, &down, Some(300), 700, &s).unwrap();
        assert!(up.max_abs_diff(&x) < 1e-4);
    }
}
