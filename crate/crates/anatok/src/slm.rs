//! Synthetic lesion mask augmentation and patch-level token labeling.
//!
//! A lesion is a soft-edged oval: in-image texture sampled from the Otsu
//! foreground, multiplied by a radial falloff field, pasted additively onto
//! a zero canvas. Patches whose mask mean strictly exceeds the global mask
//! mean are labeled abnormal.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::phantom::Image;
use crate::rng::derive_rng;

/// Non-negative additive perturbation field, same shape as its image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLesionMask {
    pub values: Array2<f32>,
}

/// Per-token normal/abnormal labels in raster order (true = abnormal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLabels {
    pub labels: Vec<bool>,
}

impl TokenLabels {
    pub fn all_normal(len: usize) -> Self {
        TokenLabels {
            labels: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn abnormal_count(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }
}

/// Otsu threshold over a 256-bin histogram plus the >=-threshold mask.
pub fn otsu_binarize(image: &Image) -> Result<(f32, Array2<bool>)> {
    let pixels = &image.pixels;
    let mut hist = [0usize; 256];
    for &v in pixels.iter() {
        let bin = ((v * 256.0) as usize).min(255);
        hist[bin] += 1;
    }
    let total = pixels.len();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Degenerate(
            "constant image has no Otsu threshold".into(),
        ));
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &c)| b as f64 * c as f64)
        .sum();
    let mut best_k = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0f64;
    let mut sum0 = 0f64;
    for k in 0..255 {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    let threshold = (best_k as f32 + 1.0) / 256.0;
    let mask = pixels.mapv(|v| v >= threshold);
    Ok((threshold, mask))
}

fn bounding_box(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let mut y0 = h;
    let mut y1 = 0;
    let mut x0 = w;
    let mut x1 = 0;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 > y1 {
        None
    } else {
        Some((y0, x0, y1 - y0 + 1, x1 - x0 + 1))
    }
}

fn bilinear_resize(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            let fy = if out_h == 1 {
                0.0
            } else {
                y as f32 * (sh - 1) as f32 / (out_h - 1) as f32
            };
            let fx = if out_w == 1 {
                0.0
            } else {
                x as f32 * (sw - 1) as f32 / (out_w - 1) as f32
            };
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let dy = fy - y0 as f32;
            let dx = fx - x0 as f32;
            out[[y, x]] = src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
                + src[[y0, x1]] * (1.0 - dy) * dx
                + src[[y1, x0]] * dy * (1.0 - dx)
                + src[[y1, x1]] * dy * dx;
        }
    }
    out
}

/// Lesion side-length range, scaled from the [16, 64] range at side 224.
pub fn lesion_size_range(image_side: usize) -> (usize, usize) {
    if image_side >= 224 {
        (16, 64)
    } else {
        let lo = ((image_side as f32 / 14.0).round() as usize).max(2);
        let hi = ((image_side as f32 * 64.0 / 224.0).round() as usize).max(lo + 1);
        (lo, hi)
    }
}

/// Crop a random rectangle inside the foreground bounding box and resize it
/// to a randomly drawn H x W texture canvas.
pub fn sample_texture(
    image: &Image,
    foreground: &Array2<bool>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let (by, bx, bh, bw) = bounding_box(foreground)
        .ok_or_else(|| Error::Degenerate("empty Otsu foreground".into()))?;
    if bh < 2 || bw < 2 {
        return Err(Error::Degenerate(format!(
            "foreground bounding box {bh}x{bw} too small"
        )));
    }
    let (w_lo, w_hi) = lesion_size_range(image.width());
    let (h_lo, h_hi) = lesion_size_range(image.height());
    let out_w = rng.gen_range(w_lo..=w_hi);
    let out_h = rng.gen_range(h_lo..=h_hi);
    let crop_h = rng.gen_range(2..=bh);
    let crop_w = rng.gen_range(2..=bw);
    let cy = by + rng.gen_range(0..=bh - crop_h);
    let cx = bx + rng.gen_range(0..=bw - crop_w);
    let crop = image
        .pixels
        .slice(s![cy..cy + crop_h, cx..cx + crop_w])
        .to_owned();
    Ok(bilinear_resize(&crop, out_h, out_w))
}

/// Scalar falloff exp(-(rho/gamma)^2).
pub fn radial_falloff(rho: f64, gamma: f64) -> f64 {
    (-(rho / gamma).powi(2)).exp()
}

/// Radial falloff field delta(w,h) = exp(-(rho/gamma)^2) on an H x W canvas.
pub fn lesion_shape(width: usize, height: usize, gamma: f32) -> Result<Array2<f32>> {
    if width < 2 || height < 2 {
        return Err(Error::Config(format!(
            "lesion canvas {height}x{width} must be at least 2x2"
        )));
    }
    if gamma <= 0.0 {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let mut delta = Array2::<f32>::zeros((height, width));
    for h in 0..height {
        for w in 0..width {
            let rho = ((w as f64 - width as f64 / 2.0).powi(2)
                + (h as f64 - height as f64 / 2.0).powi(2))
            .sqrt();
            delta[[h, w]] = radial_falloff(rho, gamma as f64) as f32;
        }
    }
    Ok(delta)
}

/// Compose R textured lesions onto a zero canvas; overlaps sum.
pub fn compose_slm(image: &Image, rng: &mut ChaCha8Rng, r: usize) -> Result<SyntheticLesionMask> {
    if !(1..=4).contains(&r) {
        return Err(Error::Config(format!("R must be in [1,4], got {r}")));
    }
    let (_, foreground) = otsu_binarize(image)?;
    let (img_h, img_w) = image.pixels.dim();
    let mut values = Array2::<f32>::zeros((img_h, img_w));
    for _ in 0..r {
        let texture = sample_texture(image, &foreground, rng)?;
        let (les_h, les_w) = texture.dim();
        if les_h > img_h || les_w > img_w {
            return Err(Error::Config(format!(
                "lesion {les_h}x{les_w} larger than image {img_h}x{img_w}"
            )));
        }
        let side = les_h.min(les_w) as f32;
        let gamma = rng.gen_range(side / 4.0..=side / 2.0);
        let delta = lesion_shape(les_w, les_h, gamma)?;
        let lesion = &texture * &delta;
        let oy = rng.gen_range(0..=img_h - les_h);
        let ox = rng.gen_range(0..=img_w - les_w);
        let mut window = values.slice_mut(s![oy..oy + les_h, ox..ox + les_w]);
        window += &lesion;
    }
    Ok(SyntheticLesionMask { values })
}

/// x' = clip(x + M, 0, 1).
pub fn apply_slm(image: &Image, mask: &SyntheticLesionMask) -> Result<Image> {
    if image.pixels.dim() != mask.values.dim() {
        return Err(Error::Integrity(format!(
            "mask {:?} does not match image {:?}",
            mask.values.dim(),
            image.pixels.dim()
        )));
    }
    let augmented = (&image.pixels + &mask.values).mapv(|v| v.clamp(0.0, 1.0));
    Ok(Image::new(augmented))
}

/// Label patch j abnormal iff its mean strictly exceeds the global mask mean.
pub fn tokenize_mask(mask: &SyntheticLesionMask, patch: usize) -> Result<TokenLabels> {
    let (h, w) = mask.values.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "mask {h}x{w} not divisible by patch {patch}"
        )));
    }
    let global_mean = mask.values.mean().unwrap_or(0.0);
    let mut labels = Vec::with_capacity((h / patch) * (w / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            let window = mask
                .values
                .slice(s![py * patch..(py + 1) * patch, px * patch..(px + 1) * patch]);
            labels.push(window.mean().unwrap() > global_mean);
        }
    }
    Ok(TokenLabels { labels })
}

/// One augmented view of a normal image.
#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub augmented: Image,
    pub mask: SyntheticLesionMask,
    pub labels: TokenLabels,
}

/// Draw one SLM view with a stream derived from (seed, image id, draw index).
pub fn augment_once(
    image: &Image,
    seed: u64,
    image_id: u64,
    draw: u64,
    patch: usize,
    r_range: (usize, usize),
) -> Result<AugmentedView> {
    let mut rng = derive_rng(seed, "slm", &[image_id, draw]);
    let r = rng.gen_range(r_range.0..=r_range.1);
    let mask = compose_slm(image, &mut rng, r)?;
    let augmented = apply_slm(image, &mask)?;
    let labels = tokenize_mask(&mask, patch)?;
    Ok(AugmentedView {
        augmented,
        mask,
        labels,
    })
}

/// N independent SLM views of one normal image.
pub fn augment_sample(
    image: &Image,
    seed: u64,
    image_id: u64,
    n: usize,
    patch: usize,
    r_range: (usize, usize),
) -> Result<Vec<AugmentedView>> {
    if n == 0 {
        return Err(Error::Config("N must be >= 1".into()));
    }
    (0..n)
        .map(|draw| augment_once(image, seed, image_id, draw as u64, patch, r_range))
        .collect()
}
