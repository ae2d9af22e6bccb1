//! Paired view augmentation: random resized crop, color jitter, random
//! grayscale, horizontal flip, and 90-degree rotations.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SampleGroup;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Side length of the augmented views.
    pub out_size: usize,
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect ratio range of the crop, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    /// Brightness/contrast/saturation jitter half-widths around 1.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift half-width as a fraction of the full circle.
    pub hue: f64,
    pub grayscale_prob: f64,
    pub hflip_prob: f64,
    /// Apply a uniformly random multiple-of-90-degree rotation.
    pub rot90: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            out_size: 64,
            crop_scale: (0.6, 1.0),
            aspect_range: (0.75, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            hflip_prob: 0.5,
            rot90: true,
        }
    }
}

impl AugmentConfig {
    /// A pass-through configuration: both views equal the input.
    pub fn identity(out_size: usize) -> Self {
        AugmentConfig {
            out_size,
            crop_scale: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            hflip_prob: 0.0,
            rot90: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_size == 0 {
            return Err(Error::Config("augment out_size must be positive".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::Config(format!(
                "aspect_range must satisfy 0 < lo <= hi, got ({alo}, {ahi})"
            )));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} jitter must be in [0,1], got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("hue jitter must be in [0,0.5], got {}", self.hue)));
        }
        for (name, p) in [("grayscale_prob", self.grayscale_prob), ("hflip_prob", self.hflip_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Two independent augmentations of one source image, deterministic in
/// `seed`. The image must be 3-channel with values in [0,1].
pub fn augment_pair(
    image: &Array3<f32>,
    source_id: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<SampleGroup> {
    cfg.validate()?;
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::invalid(
            "augmentation input",
            format!("expected 3 channels, got {c} (replicate grayscale first)"),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("augmentation input", "empty image"));
    }
    if image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("augmentation input", "values outside [0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view_a = augment_once(image, cfg, &mut rng);
    let view_b = augment_once(image, cfg, &mut rng);
    Ok(SampleGroup {
        view_a,
        view_b,
        source_id,
    })
}

fn augment_once(image: &Array3<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut out = random_resized_crop(image, cfg, rng);
    color_jitter(&mut out, cfg, rng);
    if cfg.grayscale_prob > 0.0 && rng.gen_bool(cfg.grayscale_prob) {
        to_grayscale(&mut out);
    }
    if cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob) {
        hflip(&mut out);
    }
    if cfg.rot90 {
        let k = rng.gen_range(0..4u8);
        for _ in 0..k {
            out = rot90(&out);
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn random_resized_crop(
    image: &Array3<f32>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let area = (h * w) as f64;
    let mut chosen = None;
    for _ in 0..10 {
        let s = sample_range(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let logr = sample_range(rng, cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
        let r = logr.exp();
        let cw = ((area * s * r).sqrt().round() as usize).max(1);
        let ch = ((area * s / r).sqrt().round() as usize).max(1);
        if cw <= w && ch <= h {
            let x0 = rng.gen_range(0..=w - cw);
            let y0 = rng.gen_range(0..=h - ch);
            chosen = Some((y0, x0, ch, cw));
            break;
        }
    }
    // All attempts overflowed the frame: fall back to the full image.
    let (y0, x0, ch, cw) = chosen.unwrap_or((0, 0, h, w));
    let crop = image
        .slice(ndarray::s![.., y0..y0 + ch, x0..x0 + cw])
        .to_owned();
    resize_bilinear(&crop, cfg.out_size, cfg.out_size)
}

/// Half-pixel-centered bilinear resample to (oh, ow); the identity when the
/// size does not change.
pub(super) fn resize_bilinear(image: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let top = image[[ch, y0, x0]] * (1.0 - wx) + image[[ch, y0, x1]] * wx;
                let bot = image[[ch, y1, x0]] * (1.0 - wx) + image[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Nearest-neighbor resample, for masks where interpolation would invent
/// intermediate values.
pub(super) fn resize_nearest(image: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, oh, ow));
    for oy in 0..oh {
        let y = (((oy as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for ox in 0..ow {
            let x = (((ox as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            for ch in 0..c {
                out[[ch, oy, ox]] = image[[ch, y, x]];
            }
        }
    }
    out
}

fn color_jitter(image: &mut Array3<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    if cfg.brightness > 0.0 {
        let f = sample_range(rng, (1.0 - cfg.brightness).max(0.0), 1.0 + cfg.brightness) as f32;
        image.mapv_inplace(|v| v * f);
    }
    if cfg.contrast > 0.0 {
        let f = sample_range(rng, (1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast) as f32;
        let mean = luminance_mean(image);
        image.mapv_inplace(|v| f * v + (1.0 - f) * mean);
    }
    if cfg.saturation > 0.0 {
        let f = sample_range(rng, (1.0 - cfg.saturation).max(0.0), 1.0 + cfg.saturation) as f32;
        let (_, h, w) = image.dim();
        for y in 0..h {
            for x in 0..w {
                let gray = luminance(image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
                for c in 0..3 {
                    image[[c, y, x]] = f * image[[c, y, x]] + (1.0 - f) * gray;
                }
            }
        }
    }
    if cfg.hue > 0.0 {
        let shift = sample_range(rng, -cfg.hue, cfg.hue) as f32;
        shift_hue(image, shift);
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn luminance_mean(image: &Array3<f32>) -> f32 {
    let (_, h, w) = image.dim();
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            acc += luminance(image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
        }
    }
    acc / (h * w) as f32
}

fn to_grayscale(image: &mut Array3<f32>) {
    let (_, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let gray = luminance(image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
            for c in 0..3 {
                image[[c, y, x]] = gray;
            }
        }
    }
}

fn hflip(image: &mut Array3<f32>) {
    let (c, h, w) = image.dim();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w / 2 {
                let tmp = image[[ch, y, x]];
                image[[ch, y, x]] = image[[ch, y, w - 1 - x]];
                image[[ch, y, w - 1 - x]] = tmp;
            }
        }
    }
}

/// Quarter turn: (y, x) <- (W-1-x, y).
fn rot90(image: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, w, h));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, x, h - 1 - y]] = image[[ch, y, x]];
            }
        }
    }
    out
}

fn shift_hue(image: &mut Array3<f32>, shift: f32) {
    let (_, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, s, v) = rgb_to_hsv(image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
            let nh = (hh + shift).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(nh, s, v);
            image[[0, y, x]] = r;
            image[[1, y, x]] = g;
            image[[2, y, x]] = b;
        }
    }
}

/// Hue in [0,1) turns, saturation and value in [0,1].
fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}
