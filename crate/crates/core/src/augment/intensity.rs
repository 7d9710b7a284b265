// Photometric strong augmentations. None of these move pixels, so a label
// aligned with the input stays aligned with the output.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::maps::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Identity,
    Invert,
    Autocontrast,
    Equalize,
    GaussianBlur,
    Contrast,
    Sharpness,
    Color,
    Brightness,
    Hue,
    Posterize,
    Solarize,
}

pub const OP_POOL: [OpKind; 12] = [
    OpKind::Identity,
    OpKind::Invert,
    OpKind::Autocontrast,
    OpKind::Equalize,
    OpKind::GaussianBlur,
    OpKind::Contrast,
    OpKind::Sharpness,
    OpKind::Color,
    OpKind::Brightness,
    OpKind::Hue,
    OpKind::Posterize,
    OpKind::Solarize,
];

/// An op together with its sampled magnitude (factor, σ, bit depth or
/// threshold depending on the op; 0 for parameterless ops).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityOp {
    pub op: OpKind,
    pub magnitude: f64,
}

impl IntensityOp {
    pub fn new(op: OpKind, magnitude: f64) -> Self {
        Self { op, magnitude }
    }

    pub fn sample(op: OpKind, rng: &mut impl Rng) -> Self {
        let magnitude = match op {
            OpKind::Identity | OpKind::Invert | OpKind::Autocontrast | OpKind::Equalize => 0.0,
            OpKind::GaussianBlur => rng.random_range(0.1..=1.0),
            OpKind::Contrast | OpKind::Sharpness | OpKind::Color | OpKind::Brightness => {
                rng.random_range(0.05..=0.95)
            }
            OpKind::Hue => rng.random_range(0.0..=0.5),
            OpKind::Posterize => rng.random_range(4..=8) as f64,
            OpKind::Solarize => rng.random_range(1..256) as f64 / 256.0,
        };
        Self { op, magnitude }
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let mut out = match self.op {
            OpKind::Identity => img.clone(),
            OpKind::Invert => map_values(img, |v| 1.0 - v),
            OpKind::Autocontrast => autocontrast(img),
            OpKind::Equalize => equalize(img),
            OpKind::GaussianBlur => gaussian_blur(img, self.magnitude as f32),
            OpKind::Contrast => {
                let m = mean_luma(img);
                map_values(img, |v| m + self.magnitude as f32 * (v - m))
            }
            OpKind::Sharpness => sharpness(img, self.magnitude as f32),
            OpKind::Color => color(img, self.magnitude as f32),
            OpKind::Brightness => map_values(img, |v| v * self.magnitude as f32),
            OpKind::Hue => hue_shift(img, self.magnitude as f32),
            OpKind::Posterize => posterize(img, self.magnitude as u32),
            OpKind::Solarize => {
                let t = self.magnitude as f32;
                map_values(img, |v| if v >= t { 1.0 - v } else { v })
            }
        };
        out.clamp_unit();
        out
    }
}

/// Two distinct ops drawn uniformly from the pool, with magnitudes.
pub fn sample_ops(rng: &mut impl Rng) -> Vec<IntensityOp> {
    let kinds: Vec<OpKind> = OP_POOL.choose_multiple(rng, 2).copied().collect();
    kinds.into_iter().map(|k| IntensityOp::sample(k, rng)).collect()
}

/// Applies ops in order and clamps to [0,1].
pub fn apply_ops(img: &ImageTensor, ops: &[IntensityOp]) -> ImageTensor {
    let mut out = img.clone();
    for op in ops {
        out = op.apply(&out);
    }
    out.clamp_unit();
    out
}

fn map_values(img: &ImageTensor, f: impl Fn(f32) -> f32) -> ImageTensor {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

#[inline]
fn to_bin(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn luma(img: &ImageTensor, y: usize, x: usize) -> f32 {
    if img.channels() >= 3 {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    } else {
        img.get(0, y, x)
    }
}

fn mean_luma(img: &ImageTensor) -> f32 {
    let n = img.height() * img.width();
    let mut s = 0.0f64;
    for y in 0..img.height() {
        for x in 0..img.width() {
            s += luma(img, y, x) as f64;
        }
    }
    (s / n.max(1) as f64) as f32
}

fn channel_histogram(img: &ImageTensor, c: usize) -> [usize; 256] {
    let mut hist = [0usize; 256];
    let plane = img.height() * img.width();
    for &v in &img.data()[c * plane..(c + 1) * plane] {
        hist[to_bin(v)] += 1;
    }
    hist
}

/// Per-channel stretch so the darkest histogram bin maps to 0 and the brightest to 1.
fn autocontrast(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let plane = img.height() * img.width();
    for c in 0..img.channels() {
        let hist = channel_histogram(img, c);
        let lo = hist.iter().position(|&n| n > 0).unwrap_or(0);
        let hi = hist.iter().rposition(|&n| n > 0).unwrap_or(255);
        if hi <= lo {
            continue;
        }
        let (lo, span) = (lo as f32 / 255.0, (hi - lo) as f32 / 255.0);
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = (*v - lo) / span;
        }
    }
    out
}

/// Per-channel 256-bin histogram equalisation (cumulative lookup table).
fn equalize(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let plane = img.height() * img.width();
    for c in 0..img.channels() {
        let hist = channel_histogram(img, c);
        let last = hist.iter().rposition(|&n| n > 0).map_or(0, |i| hist[i]);
        let step = (plane - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0f32; 256];
        let mut n = step / 2;
        for (i, &count) in hist.iter().enumerate() {
            lut[i] = ((n / step).min(255)) as f32 / 255.0;
            n += count;
        }
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = lut[to_bin(*v)];
        }
    }
    out
}

/// Separable 3×3 Gaussian with edge replication.
fn gaussian_blur(img: &ImageTensor, sigma: f32) -> ImageTensor {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let k = [side / norm, 1.0 / norm, side / norm];
    let (h, w) = (img.height(), img.width());
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                tmp.set(c, y, x, (0..3).map(|i| k[i] * img.get(c, y, xs[i])).sum());
            }
        }
        for y in 0..h {
            let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                out.set(c, y, x, (0..3).map(|i| k[i] * tmp.get(c, ys[i], x)).sum());
            }
        }
    }
    out
}

/// Blend with a smoothed copy (centre weight 5, neighbours 1; borders kept).
fn sharpness(img: &ImageTensor, factor: f32) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    if h < 3 || w < 3 {
        return out;
    }
    for c in 0..img.channels() {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut s = 4.0 * img.get(c, y, x);
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += img.get(c, y + dy - 1, x + dx - 1);
                    }
                }
                let smooth = s / 13.0;
                out.set(c, y, x, smooth + factor * (img.get(c, y, x) - smooth));
            }
        }
    }
    out
}

/// Blend towards per-pixel grey by `factor` (0 = greyscale, 1 = unchanged).
fn color(img: &ImageTensor, factor: f32) -> ImageTensor {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let g = luma(img, y, x);
            for c in 0..img.channels() {
                out.set(c, y, x, g + factor * (img.get(c, y, x) - g));
            }
        }
    }
    out
}

fn posterize(img: &ImageTensor, bits: u32) -> ImageTensor {
    let levels = ((1u32 << bits.clamp(1, 8)) - 1) as f32;
    map_values(img, |v| (v * levels).floor() / levels)
}

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
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns.
fn hue_shift(img: &ImageTensor, shift: f32) -> ImageTensor {
    if img.channels() < 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (h, s, v) = rgb_to_hsv(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            out.set(0, y, x, r);
            out.set(1, y, x, g);
            out.set(2, y, x, b);
        }
    }
    out
}
