//! Desk-scale stand-ins for the usual editing metrics, plus structural
//! measures that only the synthetic domain makes possible.

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::scheduler::{add_noise, DiffusionSchedule};
use crate::synthdata::{BgStyle, FgPalette};
use crate::tensor::Tensor;
use crate::unet::{Conditioning, TapController, TapId, UNetModel};

/// Time step at which structure features are read.
pub const STRUCTURE_T: usize = 100;
/// Tap whose encoder features define structure.
pub const STRUCTURE_TAP: TapId = TapId::Skip(4);
/// Side of the image-space patches pooled into structure tokens.
pub const STRUCTURE_PATCH: usize = 8;
/// Patch side used at every scale of the perceptual proxy.
pub const PERCEPTUAL_PATCH: usize = 4;
/// Palette distances above this never count as foreground, whatever Otsu says.
pub const FOREGROUND_DISTANCE_CAP: f32 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fidelity: f64,
    pub structure_dist: f64,
    pub perceptual_dist: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fg_iou: Option<f64>,
}

/// `[3, H, W]` or `[1, 3, H, W]` clamped into the valid range, as `[1, 3, H, W]`.
fn as_batch1(image: &Tensor) -> Result<Tensor> {
    let t = match image.shape().len() {
        3 => image.clone().reshape(vec![1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(Error::Shape(format!("expected a single image, got {:?}", image.shape()))),
    };
    Ok(t.map(|v| v.clamp(-1.0, 1.0)))
}

/// Classifier probability of `target_class`.
pub fn edit_fidelity(classifier: &Classifier, image: &Tensor, target_class: u32) -> Result<f64> {
    let probs = classifier.probabilities(&as_batch1(image)?)?;
    probs
        .data()
        .get(target_class as usize)
        .map(|&p| p as f64)
        .ok_or_else(|| Error::invalid("target_class", format!("{target_class} outside the classifier's classes")))
}

/// Encoder features of `image` at the structure tap, `[C, h, w]`.
pub fn structure_features(model: &UNetModel, schedule: &DiffusionSchedule, image: &Tensor) -> Result<Tensor> {
    let x = as_batch1(image)?;
    // Zero noise keeps the features a deterministic function of the image.
    let xt = add_noise(&x, &Tensor::zeros(x.shape().to_vec()), STRUCTURE_T, schedule)?;
    let ctrl = TapController::recording([STRUCTURE_TAP]);
    let (_, bundle) = model.forward(&xt, STRUCTURE_T, Conditioning::null(), Some(&ctrl))?;
    let f = bundle.get(&STRUCTURE_TAP).ok_or_else(|| Error::MissingTap(STRUCTURE_TAP.to_string()))?;
    let s = f.shape();
    f.clone().reshape(vec![s[1], s[2], s[3]])
}

/// Cosine self-similarity between patch-pooled feature tokens, row-major `[n, n]`.
pub fn self_similarity(features: &Tensor, patch: usize) -> Result<Vec<f64>> {
    let &[c, h, w] = features.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W] features, got {:?}", features.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("patch {patch} does not tile {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut tokens = vec![vec![0.0f64; c]; gh * gw];
    let d = features.data();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                tokens[(y / patch) * gw + x / patch][ch] += d[(ch * h + y) * w + x] as f64;
            }
        }
    }
    let norms: Vec<f64> = tokens.iter().map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let n = tokens.len();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = tokens[i].iter().zip(&tokens[j]).map(|(a, b)| a * b).sum();
            let denom = norms[i] * norms[j];
            s[i * n + j] = if denom > 1e-12 { dot / denom } else { 0.0 };
        }
    }
    Ok(s)
}

/// `||S_x - S_y||_F / (number of matrix entries)` over structure-tap self-similarities.
pub fn structure_distance(model: &UNetModel, schedule: &DiffusionSchedule, x: &Tensor, y: &Tensor) -> Result<f64> {
    let fx = structure_features(model, schedule, x)?;
    let fy = structure_features(model, schedule, y)?;
    let image_size = model.config().image_size;
    let patch = (STRUCTURE_PATCH * fx.shape()[1] / image_size).max(1);
    let sx = self_similarity(&fx, patch)?;
    let sy = self_similarity(&fy, patch)?;
    let frob = sx.iter().zip(&sy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(frob / sx.len() as f64)
}

/// 2x2 average pooling of `[C, H, W]` data.
fn avg_pool2(data: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let at = |yy: usize, xx: usize| data[(ch * h + yy) * w + xx];
                out[(ch * oh + y) * ow + x] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    out
}

/// Root-mean-square difference after removing each patch's per-channel mean.
fn patch_normalized_rms(a: &[f32], b: &[f32], c: usize, h: usize, w: usize, patch: usize) -> f64 {
    let p = patch.min(h).min(w);
    let mut sum = 0.0f64;
    for ch in 0..c {
        for py in (0..h).step_by(p) {
            for px in (0..w).step_by(p) {
                let idx: Vec<usize> = (py..(py + p).min(h))
                    .flat_map(|y| (px..(px + p).min(w)).map(move |x| (ch * h + y) * w + x))
                    .collect();
                let n = idx.len() as f64;
                let ma = idx.iter().map(|&i| a[i] as f64).sum::<f64>() / n;
                let mb = idx.iter().map(|&i| b[i] as f64).sum::<f64>() / n;
                sum += idx.iter().map(|&i| ((a[i] as f64 - ma) - (b[i] as f64 - mb)).powi(2)).sum::<f64>();
            }
        }
    }
    (sum / (c * h * w) as f64).sqrt()
}

/// Mean over full, half and quarter resolution of the patch-normalised RMS difference.
pub fn perceptual_proxy(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (x, y) = (as_batch1(x)?, as_batch1(y)?);
    x.check_same(&y)?;
    let (_, c, mut h, mut w) = x.dims4()?;
    let (mut a, mut b) = (x.into_data(), y.into_data());
    let mut total = 0.0;
    let mut scales = 0;
    for level in 0..3 {
        if level > 0 {
            if h < 2 || w < 2 {
                break;
            }
            a = avg_pool2(&a, c, h, w);
            b = avg_pool2(&b, c, h, w);
            h /= 2;
            w /= 2;
        }
        total += patch_normalized_rms(&a, &b, c, h, w, PERCEPTUAL_PATCH);
        scales += 1;
    }
    Ok(total / scales as f64)
}

/// Peak signal-to-noise ratio in dB of two `[-1, 1]` images, both clamped to
/// that range first (as they would be when saved). Identical images give +inf.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (x, y) = (as_batch1(x)?, as_batch1(y)?);
    x.check_same(&y)?;
    let mse = x.data().iter().zip(y.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
    // Peak-to-peak range is 2, so the peak power is 4.
    Ok(10.0 * (4.0 / mse).log10())
}

/// Between-class-variance maximising threshold over `values`.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    const BINS: usize = 256;
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return 0.0;
    }
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[((v / max) * (BINS - 1) as f32).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_bin) = (0.0f64, 0.0f64, -1.0f64, 0usize);
    for (i, &n) in hist.iter().enumerate() {
        w0 += n as f64;
        sum0 += i as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    (best_bin as f32 + 0.5) / (BINS - 1) as f32 * max
}

/// Keeps only the largest 4-connected `true` region.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, next));
        }
        next += 1;
    }
    match best {
        Some((_, id)) => label.iter().map(|&l| l == id).collect(),
        None => vec![false; mask.len()],
    }
}

fn pixel_colors(image: &Tensor) -> Result<(Vec<[f32; 3]>, usize, usize)> {
    let x = as_batch1(image)?;
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    let plane = h * w;
    let d = x.data();
    Ok(((0..plane).map(|i| [d[i], d[plane + i], d[2 * plane + i]]).collect(), h, w))
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Pixels close to the foreground palette colour: Otsu threshold on palette
/// distance (capped), then the largest connected region.
pub fn detect_foreground(image: &Tensor, palette: FgPalette) -> Result<Vec<bool>> {
    let (pixels, h, w) = pixel_colors(image)?;
    let target = palette.color();
    let dist: Vec<f32> = pixels.iter().map(|&p| color_distance(p, target)).collect();
    let threshold = otsu_threshold(&dist).min(FOREGROUND_DISTANCE_CAP);
    let raw: Vec<bool> = dist.iter().map(|&d| d <= threshold).collect();
    Ok(largest_component(&raw, h, w))
}

/// Intersection over union; two empty masks score 0.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("mask sizes {} vs {}", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub fn foreground_iou(image: &Tensor, reference_mask: &[bool], palette: FgPalette) -> Result<f64> {
    mask_iou(&detect_foreground(image, palette)?, reference_mask)
}

/// Distance between the mean colour of the non-foreground pixels and the style's palette.
pub fn background_palette_distance(image: &Tensor, foreground: &[bool], style: BgStyle) -> Result<f64> {
    let (pixels, _, _) = pixel_colors(image)?;
    if foreground.len() != pixels.len() {
        return Err(Error::Shape(format!("mask of {} for {} pixels", foreground.len(), pixels.len())));
    }
    let bg: Vec<&[f32; 3]> = pixels.iter().zip(foreground).filter(|(_, f)| !**f).map(|(p, _)| p).collect();
    if bg.is_empty() {
        return Ok(0.0);
    }
    let mut mean = [0.0f64; 3];
    for p in &bg {
        for c in 0..3 {
            mean[c] += p[c] as f64 / bg.len() as f64;
        }
    }
    let target = style.mean_color();
    Ok((0..3).map(|c| (mean[c] - target[c] as f64).powi(2)).sum::<f64>().sqrt())
}

/// Mean absolute difference between horizontally adjacent background pixels,
/// high for the noise texture and near zero for the solid styles.
pub fn texture_statistic(image: &Tensor, foreground: &[bool]) -> Result<f64> {
    let (pixels, h, w) = pixel_colors(image)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let (i, j) = (y * w + x, y * w + x + 1);
            if foreground[i] || foreground[j] {
                continue;
            }
            sum += (0..3).map(|c| (pixels[i][c] - pixels[j][c]).abs() as f64).sum::<f64>() / 3.0;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_matches_the_unit_range_definition() {
        // A uniform error of 0.1 in [0, 1] units is 0.2 here: 20 dB either way.
        let a = Tensor::full(vec![1, 3, 4, 4], 0.0);
        let b = Tensor::full(vec![1, 3, 4, 4], 0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }
    use crate::synthdata::{render_scene, SceneSpec, Shape};

    fn scene(shape: Shape, fg: FgPalette, bg: BgStyle, seed: u64) -> (Tensor, Vec<bool>) {
        let s = render_scene(&SceneSpec { shape, fg_palette: fg, bg_style: bg, jitter_seed: seed });
        (s.image, s.mask)
    }

    #[test]
    fn detector_recovers_rendered_masks() {
        for (i, &shape) in Shape::ALL.iter().enumerate() {
            for &fg in &FgPalette::ALL {
                for &bg in &BgStyle::ALL {
                    let (img, mask) = scene(shape, fg, bg, i as u64 * 31 + 7);
                    let iou = foreground_iou(&img, &mask, fg).unwrap();
                    assert!(iou >= 0.95, "{shape:?} {fg:?} {bg:?}: {iou}");
                }
            }
        }
    }

    #[test]
    fn background_only_image_scores_zero() {
        let (_, mask) = scene(Shape::Circle, FgPalette::Red, BgStyle::SolidBlue, 1);
        let bg = crate::synthdata::render_background(BgStyle::SolidBlue, 1, 32);
        assert_eq!(foreground_iou(&bg, &mask, FgPalette::Red).unwrap(), 0.0);
    }

    #[test]
    fn iou_is_symmetric() {
        let (_, a) = scene(Shape::Circle, FgPalette::Red, BgStyle::SolidBlue, 1);
        let (_, b) = scene(Shape::Square, FgPalette::Red, BgStyle::SolidBlue, 2);
        assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
    }

    #[test]
    fn perceptual_proxy_properties() {
        let (x, _) = scene(Shape::Circle, FgPalette::Yellow, BgStyle::Gradient, 3);
        assert_eq!(perceptual_proxy(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.1);
        assert!(perceptual_proxy(&x, &shifted).unwrap() < 1e-6);
        let (y, _) = scene(Shape::Square, FgPalette::White, BgStyle::NoiseTexture, 9);
        assert!((perceptual_proxy(&x, &y).unwrap() - perceptual_proxy(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn texture_statistic_separates_styles() {
        let (solid, m1) = scene(Shape::Circle, FgPalette::Red, BgStyle::SolidGreen, 3);
        let (noisy, m2) = scene(Shape::Circle, FgPalette::Red, BgStyle::NoiseTexture, 3);
        assert!(texture_statistic(&solid, &m1).unwrap() < 1e-6);
        assert!(texture_statistic(&noisy, &m2).unwrap() > 0.05);
        assert!(background_palette_distance(&solid, &m1, BgStyle::SolidGreen).unwrap() < 1e-5);
    }

    #[test]
    fn self_similarity_of_uniform_features_is_one() {
        let f = Tensor::full(vec![4, 8, 8], 1.5);
        let s = self_similarity(&f, 4).unwrap();
        assert_eq!(s.len(), 16);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
