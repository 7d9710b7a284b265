use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ImageTensor, LabelMap, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakAugConfig {
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl WeakAugConfig {
    pub fn new(crop: usize) -> Self {
        Self {
            crop,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
        }
    }
}

/// Resize → horizontal flip → crop, recorded exactly so labels can follow.
///
/// Output pixel `(y, x)` reads the scaled (and possibly flipped) frame at
/// `(y + top, x + left)`. Coordinates outside the scaled frame replicate the
/// edge for images and become [`IGNORE`] for labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub src_h: usize,
    pub src_w: usize,
    pub scale: f64,
    pub flip: bool,
    pub top: isize,
    pub left: isize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl Geometry {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            src_h: h,
            src_w: w,
            scale: 1.0,
            flip: false,
            top: 0,
            left: 0,
            crop_h: h,
            crop_w: w,
        }
    }

    /// Size of the resized frame.
    pub fn scaled_size(&self) -> (usize, usize) {
        let sh = ((self.src_h as f64 * self.scale).round() as usize).max(1);
        let sw = ((self.src_w as f64 * self.scale).round() as usize).max(1);
        (sh, sw)
    }

    pub fn sample(h: usize, w: usize, cfg: &WeakAugConfig, rng: &mut impl Rng) -> Self {
        let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let flip = rng.random_bool(cfg.flip_prob);
        let mut g = Self {
            src_h: h,
            src_w: w,
            scale,
            flip,
            top: 0,
            left: 0,
            crop_h: cfg.crop,
            crop_w: cfg.crop,
        };
        let (sh, sw) = g.scaled_size();
        g.top = crop_offset(rng, sh, cfg.crop);
        g.left = crop_offset(rng, sw, cfg.crop);
        g
    }

    /// Position in the scaled, flipped frame, or `None` outside it.
    fn scaled_pos(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.scaled_size();
        let sy = y as isize + self.top;
        let sx = x as isize + self.left;
        if sy < 0 || sx < 0 || sy >= sh as isize || sx >= sw as isize {
            return None;
        }
        let sx = if self.flip { sw - 1 - sx as usize } else { sx as usize };
        Some((sy as usize, sx))
    }

    /// Source pixel whose label lands at output `(y, x)`.
    pub fn label_source(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.scaled_size();
        let (sy, sx) = self.scaled_pos(y, x)?;
        // nearest source pixel of the scaled pixel centre: ⌊(s + ½)·src/scaled⌋
        let oy = ((2 * sy + 1) * self.src_h / (2 * sh)).min(self.src_h - 1);
        let ox = ((2 * sx + 1) * self.src_w / (2 * sw)).min(self.src_w - 1);
        Some((oy, ox))
    }

    pub fn apply_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        if (img.height(), img.width()) != (self.src_h, self.src_w) {
            return Err(Error::dim("geometry recorded for a different image size"));
        }
        let (sh, sw) = self.scaled_size();
        let (h, w) = (self.src_h, self.src_w);
        let mut out = ImageTensor::filled(img.channels(), self.crop_h, self.crop_w, 0.0);
        let ry = h as f64 / sh as f64;
        let rx = w as f64 / sw as f64;
        for y in 0..self.crop_h {
            let sy = (y as isize + self.top).clamp(0, sh as isize - 1) as usize;
            let fy = ((sy as f64 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..self.crop_w {
                let mut sx = (x as isize + self.left).clamp(0, sw as isize - 1) as usize;
                if self.flip {
                    sx = sw - 1 - sx;
                }
                let fx = ((sx as f64 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..img.channels() {
                    let v = if wy == 0.0 && wx == 0.0 {
                        img.get(c, y0, x0)
                    } else {
                        let top = img.get(c, y0, x0) * (1.0 - wx) + img.get(c, y0, x1) * wx;
                        let bot = img.get(c, y1, x0) * (1.0 - wx) + img.get(c, y1, x1) * wx;
                        top * (1.0 - wy) + bot * wy
                    };
                    out.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(out)
    }

    pub fn apply_label(&self, label: &LabelMap) -> Result<LabelMap> {
        if (label.height(), label.width()) != (self.src_h, self.src_w) {
            return Err(Error::dim("geometry recorded for a different label size"));
        }
        let mut out = LabelMap::filled(self.crop_h, self.crop_w, IGNORE);
        for y in 0..self.crop_h {
            for x in 0..self.crop_w {
                if let Some((oy, ox)) = self.label_source(y, x) {
                    out.set(y, x, label.get(oy, ox));
                }
            }
        }
        Ok(out)
    }
}

// Uniform crop offset; negative when the scaled frame is smaller than the crop.
fn crop_offset(rng: &mut impl Rng, scaled: usize, crop: usize) -> isize {
    let slack = scaled as isize - crop as isize;
    let (lo, hi) = if slack >= 0 { (0, slack) } else { (slack, 0) };
    rng.random_range(lo as i64..=hi as i64) as isize
}

/// Mirrors an image left-right.
pub fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        ImageTensor::new(3, h, w, data).unwrap()
    }

    #[test]
    fn identity_geometry() {
        let img = ramp(8, 12);
        let g = Geometry::identity(8, 12);
        assert_eq!(g.apply_image(&img).unwrap(), img);
        let lab = LabelMap::new(8, 12, (0..96).map(|i| (i % 4) as u8).collect()).unwrap();
        assert_eq!(g.apply_label(&lab).unwrap(), lab);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(6, 7);
        let g = Geometry {
            flip: true,
            ..Geometry::identity(6, 7)
        };
        let once = g.apply_image(&img).unwrap();
        assert_ne!(once, img);
        assert_eq!(once, flip_horizontal(&img));
        assert_eq!(g.apply_image(&once).unwrap(), img);
    }

    #[test]
    fn label_follows_coordinate_map() {
        // Oracle: undo the crop, undo the flip, then map scaled pixel centres
        // back to the source grid with nearest rounding.
        let (h, w) = (20, 24);
        let lab = LabelMap::new(h, w, (0..h * w).map(|i| ((i * 31 + i / w) % 200) as u8).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = WeakAugConfig::new(16);
        for _ in 0..50 {
            let g = Geometry::sample(h, w, &cfg, &mut rng);
            let out = g.apply_label(&lab).unwrap();
            let sh = ((h as f64 * g.scale).round() as i64).max(1);
            let sw = ((w as f64 * g.scale).round() as i64).max(1);
            for y in 0..16i64 {
                for x in 0..16i64 {
                    let (py, mut px) = (y + g.top as i64, x + g.left as i64);
                    let expect = if py < 0 || px < 0 || py >= sh || px >= sw {
                        IGNORE
                    } else {
                        if g.flip {
                            px = sw - 1 - px;
                        }
                        let oy = ((2 * py + 1) * h as i64 / (2 * sh)).min(h as i64 - 1);
                        let ox = ((2 * px + 1) * w as i64 / (2 * sw)).min(w as i64 - 1);
                        lab.get(oy as usize, ox as usize)
                    };
                    assert_eq!(out.get(y as usize, x as usize), expect, "{g:?} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn small_scale_pads_with_edges_and_ignore() {
        let img = ramp(16, 16);
        let g = Geometry {
            scale: 0.5,
            top: -4,
            left: -4,
            crop_h: 16,
            crop_w: 16,
            ..Geometry::identity(16, 16)
        };
        let out = g.apply_image(&img).unwrap();
        // replicated edge: row 0 equals the first scaled row at the same column
        for x in 0..16 {
            assert_eq!(out.get(0, 0, x), out.get(0, 4, x));
        }
        let lab = g.apply_label(&LabelMap::filled(16, 16, 1)).unwrap();
        assert_eq!(lab.get(0, 0), IGNORE);
        assert_eq!(lab.get(4, 4), 1);
        assert_eq!(lab.get(11, 11), 1);
        assert_eq!(lab.get(12, 12), IGNORE);
    }

    #[test]
    fn sampled_geometry_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = WeakAugConfig::new(32);
        for _ in 0..200 {
            let g = Geometry::sample(32, 32, &cfg, &mut rng);
            assert!((0.5..=2.0).contains(&g.scale));
            let (sh, _) = g.scaled_size();
            let slack = sh as isize - 32;
            assert!(g.top >= slack.min(0) && g.top <= slack.max(0));
            let out = g.apply_image(&ramp(32, 32)).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
