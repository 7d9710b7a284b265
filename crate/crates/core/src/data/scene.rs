use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::maps::{ImageTensor, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Stripe,
}

const KINDS: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Stripe];

/// Shape drawn for class `c ≥ 1`, and whether it is drawn as an outline.
/// Classes past the fourth reuse the kinds as hollow shapes.
pub fn class_shape(c: usize) -> (ShapeKind, bool) {
    (KINDS[(c - 1) % 4], c > 4)
}

/// Rendering knobs. The defaults are what `generate_dataset` uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    /// Std-dev of the per-pixel Gaussian noise.
    pub noise: f32,
    /// Relative frequency of stripe shapes against 1.0 for every other class.
    pub stripe_weight: f64,
    /// Half-width of the hue window around each class's base hue. The default
    /// 0.5 allows any hue, so colour says nothing about the class.
    pub hue_jitter: f32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape radius range as a fraction of the shorter side.
    pub size_min: f32,
    pub size_max: f32,
    /// Depth of the class-specific fill pattern, as a fraction of the fill colour.
    pub texture: f32,
    /// Paint every shape of a scene in one colour.
    pub shared_color: bool,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            noise: 0.04,
            stripe_weight: 0.12,
            hue_jitter: 0.5,
            min_shapes: 1,
            max_shapes: 4,
            size_min: 0.18,
            size_max: 0.30,
            texture: 0.8,
            shared_color: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesScene {
    pub image: ImageTensor,
    pub label: LabelMap,
    pub noise: f32,
    pub seed: u64,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

trait Region {
    fn inside(&self, y: f32, x: f32) -> bool;
}

struct Disk {
    cy: f32,
    cx: f32,
    r: f32,
}

impl Region for Disk {
    fn inside(&self, y: f32, x: f32) -> bool {
        (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.r * self.r
    }
}

/// Rectangle rotated by `angle` around its centre.
struct Rect {
    cy: f32,
    cx: f32,
    half_h: f32,
    half_w: f32,
    cos: f32,
    sin: f32,
}

impl Region for Rect {
    fn inside(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        u.abs() <= self.half_w && v.abs() <= self.half_h
    }
}

struct Triangle {
    v: [(f32, f32); 3],
}

impl Region for Triangle {
    fn inside(&self, y: f32, x: f32) -> bool {
        let edge = |a: (f32, f32), b: (f32, f32)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
        let d0 = edge(self.v[0], self.v[1]);
        let d1 = edge(self.v[1], self.v[2]);
        let d2 = edge(self.v[2], self.v[0]);
        (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
    }
}

/// Points inside `outer` but outside `inner`.
struct Hollow<A, B> {
    outer: A,
    inner: B,
}

impl<A: Region, B: Region> Region for Hollow<A, B> {
    fn inside(&self, y: f32, x: f32) -> bool {
        self.outer.inside(y, x) && !self.inner.inside(y, x)
    }
}

fn make_region(kind: ShapeKind, hollow: bool, h: usize, w: usize, style: &SceneStyle, rng: &mut impl Rng) -> Box<dyn Region> {
    let side = h.min(w) as f32;
    let cy = rng.random_range(0.15..0.85) * h as f32;
    let cx = rng.random_range(0.15..0.85) * w as f32;
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (sin, cos) = angle.sin_cos();
    let size = rng.random_range(style.size_min..=style.size_max) * side;
    let shape: Box<dyn Region> = match kind {
        ShapeKind::Disk => {
            let outer = Disk { cy, cx, r: size };
            if hollow {
                Box::new(Hollow { outer, inner: Disk { cy, cx, r: size * 0.55 } })
            } else {
                Box::new(outer)
            }
        }
        ShapeKind::Rectangle => {
            let aspect: f32 = rng.random_range(0.6..1.6);
            let (half_h, half_w) = (size * aspect.sqrt() * 0.85, size / aspect.sqrt() * 0.85);
            let outer = Rect { cy, cx, half_h, half_w, cos, sin };
            if hollow {
                let inner = Rect { cy, cx, half_h: half_h * 0.5, half_w: half_w * 0.5, cos, sin };
                Box::new(Hollow { outer, inner })
            } else {
                Box::new(outer)
            }
        }
        ShapeKind::Triangle => {
            let r = size * 1.25;
            let corner = |k: f32, r: f32| {
                let a = angle + k * 2.0 * std::f32::consts::PI / 3.0;
                (cy + r * a.sin(), cx + r * a.cos())
            };
            let outer = Triangle { v: [corner(0.0, r), corner(1.0, r), corner(2.0, r)] };
            if hollow {
                let r = r * 0.5;
                let inner = Triangle { v: [corner(0.0, r), corner(1.0, r), corner(2.0, r)] };
                Box::new(Hollow { outer, inner })
            } else {
                Box::new(outer)
            }
        }
        ShapeKind::Stripe => {
            let half_w = rng.random_range(0.3..0.45) * side;
            let half_h = rng.random_range(1.0..1.75);
            let outer = Rect { cy, cx, half_h, half_w, cos, sin };
            if hollow {
                // a dashed stripe
                let inner = Rect { cy, cx, half_h, half_w: half_w * 0.3, cos, sin };
                Box::new(Hollow { outer, inner })
            } else {
                Box::new(outer)
            }
        }
    };
    shape
}

fn sample_class(k: usize, style: &SceneStyle, rng: &mut impl Rng) -> usize {
    let weight = |c: usize| if class_shape(c).0 == ShapeKind::Stripe { style.stripe_weight } else { 1.0 };
    let total: f64 = (1..k).map(weight).sum();
    let mut r = rng.random_range(0.0..total);
    for c in 1..k {
        r -= weight(c);
        if r < 0.0 {
            return c;
        }
    }
    k - 1
}

// 0/1 fill pattern with a 4-pixel period: plain disks, horizontal bands on
// rectangles, vertical bands on triangles, diagonal bands on stripes. Band
// orientation survives rescaling and horizontal flips.
fn fill_pattern(kind: ShapeKind, y: usize, x: usize) -> bool {
    match kind {
        ShapeKind::Disk => false,
        ShapeKind::Rectangle => (y / 2) % 2 == 1,
        ShapeKind::Triangle => (x / 2) % 2 == 1,
        ShapeKind::Stripe => ((y + x) / 2) % 2 == 1,
    }
}

/// Renders one scene: a noisy low-saturation background with 1–4 shapes
/// painted in order, later shapes occluding earlier ones. A shape's class
/// shows in its outline and its fill pattern, never in its colour.
pub fn render_scene(h: usize, w: usize, k: usize, seed: u64, style: &SceneStyle, rng: &mut impl Rng) -> ShapesScene {
    let mut image = ImageTensor::filled(3, h, w, 0.0);
    let mut label = LabelMap::filled(h, w, 0);
    let bg = hsv(rng.random(), rng.random_range(0.0..0.25), rng.random_range(0.25..0.75));
    // smooth background texture: a random tilted gradient
    let (gy, gx) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
    for y in 0..h {
        for x in 0..w {
            let t = gy * (y as f32 / h as f32 - 0.5) + gx * (x as f32 / w as f32 - 0.5);
            for c in 0..3 {
                image.set(c, y, x, bg[c] + t);
            }
        }
    }
    let n = rng.random_range(style.min_shapes..=style.max_shapes);
    let mut scene_color = None;
    for _ in 0..n {
        let class = sample_class(k, style, rng);
        let (kind, hollow) = class_shape(class);
        let base_hue = (class - 1) as f32 / (k - 1) as f32;
        let hue = base_hue + rng.random_range(-style.hue_jitter..=style.hue_jitter);
        let own = hsv(hue, rng.random_range(0.5..1.0), rng.random_range(0.55..1.0));
        let color = if style.shared_color { *scene_color.get_or_insert(own) } else { own };
        let region = make_region(kind, hollow, h, w, style, rng);
        for y in 0..h {
            for x in 0..w {
                if region.inside(y as f32 + 0.5, x as f32 + 0.5) {
                    label.set(y, x, class as u8);
                    let shade = if fill_pattern(kind, y, x) { 1.0 - style.texture } else { 1.0 };
                    for c in 0..3 {
                        image.set(c, y, x, color[c] * shade);
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite noise level");
    for v in image.data_mut() {
        *v += noise.sample(rng);
    }
    image.clamp_unit();
    ShapesScene {
        image,
        label,
        noise: style.noise,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_kind_renders_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in 1..8 {
            let (kind, hollow) = class_shape(c);
            for _ in 0..20 {
                let region = make_region(kind, hollow, 32, 32, &SceneStyle::default(), &mut rng);
                let area = (0..32 * 32)
                    .filter(|&i| region.inside((i / 32) as f32 + 0.5, (i % 32) as f32 + 0.5))
                    .count();
                assert!(area > 0, "class {c} rendered nothing");
            }
        }
    }

    #[test]
    fn scene_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 2..=8 {
            let s = render_scene(24, 20, k, 0, &SceneStyle::default(), &mut rng);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.label.data().iter().all(|&l| (l as usize) < k));
        }
    }

    #[test]
    fn stripes_are_rare() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let style = SceneStyle::default();
        let with_stripe = (0..1000)
            .filter(|_| render_scene(32, 32, 5, 0, &style, &mut rng).label.data().contains(&4))
            .count();
        assert!((40..200).contains(&with_stripe), "{with_stripe}");
    }

    #[test]
    fn fill_patterns_by_orientation() {
        let rows = |k| (0..8).map(|y| fill_pattern(k, y, 0)).collect::<Vec<_>>();
        let cols = |k| (0..8).map(|x| fill_pattern(k, 0, x)).collect::<Vec<_>>();
        let bands = vec![false, false, true, true, false, false, true, true];
        assert_eq!(rows(ShapeKind::Rectangle), bands);
        assert!(cols(ShapeKind::Rectangle).iter().all(|&b| !b));
        assert_eq!(cols(ShapeKind::Triangle), bands);
        assert!(rows(ShapeKind::Triangle).iter().all(|&b| !b));
        assert!((0..64).all(|i| !fill_pattern(ShapeKind::Disk, i / 8, i % 8)));
    }

    #[test]
    fn one_colour_per_scene() {
        let style = SceneStyle { noise: 0.0, texture: 0.0, ..SceneStyle::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = render_scene(32, 32, 4, 0, &style, &mut rng);
            let fg: Vec<usize> = (0..32 * 32).filter(|&j| s.label.data()[j] != 0).collect();
            let px = |j: usize| [0, 1, 2].map(|c| s.image.get(c, j / 32, j % 32));
            if let Some(&first) = fg.first() {
                assert!(fg.iter().all(|&j| px(j) == px(first)));
            }
        }
    }
}
