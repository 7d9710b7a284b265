//! Weak geometry, photometric strong augmentation, and the two
//! hardness-adaptive strong augmentations (blend and CutMix).

mod cutmix;
mod intensity;
mod weak;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ImageTensor, LabelMap};

pub use cutmix::{
    adaptive_cutmix, hardness_pairs, make_region_mask, plan_adaptive_cutmix, plan_random_cutmix, CutmixPlan,
    CutmixTrigger, RegionMask,
};
pub use intensity::{apply_ops, sample_ops, IntensityOp, OpKind, OP_POOL};
pub use weak::{flip_horizontal, Geometry, WeakAugConfig};

/// Everything needed to replay the augmentation of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub geometry: Geometry,
    pub intensity_ops: Vec<IntensityOp>,
    pub cutmix: Option<(usize, RegionMask)>,
}

impl AugRecord {
    pub fn new(geometry: Geometry) -> Self {
        Self {
            geometry,
            intensity_ops: Vec::new(),
            cutmix: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("augmentation records always serialise")
    }
}

pub fn weak_augment(
    image: &ImageTensor,
    label: Option<&LabelMap>,
    cfg: &WeakAugConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, Option<LabelMap>, AugRecord)> {
    let geometry = Geometry::sample(image.height(), image.width(), cfg, rng);
    let img = geometry.apply_image(image)?;
    let lab = label.map(|l| geometry.apply_label(l)).transpose()?;
    Ok((img, lab, AugRecord::new(geometry)))
}

/// Two random photometric ops. The returned record carries an identity geometry.
pub fn intensity_strong(image: &ImageTensor, rng: &mut impl Rng) -> (ImageTensor, AugRecord) {
    let ops = sample_ops(rng);
    let out = apply_ops(image, &ops);
    let mut rec = AugRecord::new(Geometry::identity(image.height(), image.width()));
    rec.intensity_ops = ops;
    (out, rec)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendDirection {
    /// Strong coefficient 1 − γ: hard instances stay close to the weak view.
    #[default]
    Prose,
    /// Strong coefficient γ.
    Literal,
}

impl BlendDirection {
    pub fn strong_coefficient(self, gamma: f64) -> f64 {
        match self {
            BlendDirection::Prose => 1.0 - gamma,
            BlendDirection::Literal => gamma,
        }
    }
}

/// `coef·strong + (1−coef)·weak`, exact at both endpoints.
pub fn blend(strong: &ImageTensor, weak: &ImageTensor, coef: f64) -> Result<ImageTensor> {
    if !strong.same_shape(weak) {
        return Err(Error::dim("blend operands differ in shape"));
    }
    if !(0.0..=1.0).contains(&coef) {
        return Err(Error::arg(format!("blend coefficient {coef} outside [0,1]")));
    }
    if coef == 0.0 {
        return Ok(weak.clone());
    }
    if coef == 1.0 {
        return Ok(strong.clone());
    }
    let a = coef as f32;
    let mut out = weak.clone();
    for (o, s) in out.data_mut().iter_mut().zip(strong.data()) {
        *o = (a * s + (1.0 - a) * *o).clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn adaptive_blend(
    strong: &ImageTensor,
    weak: &ImageTensor,
    gamma: f64,
    direction: BlendDirection,
) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::arg(format!("hardness {gamma} outside [0,1]")));
    }
    blend(strong, weak, direction.strong_coefficient(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(3, 8, 8, (0..192).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let (s, w) = (noise(1), noise(2));
        assert_eq!(adaptive_blend(&s, &w, 0.0, BlendDirection::Literal).unwrap(), w);
        assert_eq!(adaptive_blend(&s, &w, 1.0, BlendDirection::Literal).unwrap(), s);
        assert_eq!(adaptive_blend(&s, &w, 0.0, BlendDirection::Prose).unwrap(), s);
        assert_eq!(adaptive_blend(&s, &w, 1.0, BlendDirection::Prose).unwrap(), w);
    }

    #[test]
    fn blend_midpoint() {
        let s = ImageTensor::filled(3, 2, 2, 1.0);
        let w = ImageTensor::filled(3, 2, 2, 0.0);
        let out = adaptive_blend(&s, &w, 0.5, BlendDirection::Prose).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let quarter = adaptive_blend(&s, &w, 0.25, BlendDirection::Prose).unwrap();
        assert!(quarter.data().iter().all(|&v| v == 0.75));
        let literal = adaptive_blend(&s, &w, 0.25, BlendDirection::Literal).unwrap();
        assert!(literal.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn blend_rejects_bad_gamma_and_shapes() {
        let (s, w) = (noise(1), noise(2));
        for g in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(adaptive_blend(&s, &w, g, BlendDirection::Prose), Err(Error::Argument(_))));
        }
        let small = ImageTensor::filled(3, 4, 4, 0.0);
        assert!(adaptive_blend(&s, &small, 0.5, BlendDirection::Prose).is_err());
    }

    #[test]
    fn weak_augment_keeps_label_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = noise(4);
        let lab = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
        let cfg = WeakAugConfig::new(8);
        let (out, out_lab, rec) = weak_augment(&img, Some(&lab), &cfg, &mut rng).unwrap();
        assert_eq!(out_lab.unwrap(), rec.geometry.apply_label(&lab).unwrap());
        assert_eq!(out, rec.geometry.apply_image(&img).unwrap());
    }

    #[test]
    fn intensity_strong_leaves_geometry_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = noise(6);
        let (out, rec) = intensity_strong(&img, &mut rng);
        assert!(out.same_shape(&img));
        assert_eq!(rec.geometry, Geometry::identity(8, 8));
        assert_eq!(rec.intensity_ops.len(), 2);
        assert_eq!(apply_ops(&img, &rec.intensity_ops), out);
    }

    #[test]
    fn record_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_, mut rec) = intensity_strong(&noise(8), &mut rng);
        rec.cutmix = Some((2, make_region_mask(8, 8, &mut rng).unwrap()));
        let back: AugRecord = serde_json::from_str(&rec.to_json()).unwrap();
        assert_eq!(back, rec);
    }
}
