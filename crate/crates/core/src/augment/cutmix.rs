use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardness::{mean_gamma, sort_by_hardness, HardnessReport};
use crate::maps::{ImageTensor, LabelMap, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub frame_h: usize,
    pub frame_w: usize,
}

impl RegionMask {
    /// An empty rectangle: mixing with it leaves the target untouched.
    pub fn empty(frame_h: usize, frame_w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: 0,
            width: 0,
            frame_h,
            frame_w,
        }
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area_ratio(&self) -> f64 {
        (self.height * self.width) as f64 / (self.frame_h * self.frame_w) as f64
    }

    /// Binary H×W mask, row-major.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.frame_h * self.frame_w];
        for y in 0..self.frame_h {
            for x in 0..self.frame_w {
                m[y * self.frame_w + x] = self.contains(y, x) as u8;
            }
        }
        m
    }

    /// Row-major indices of the pixels inside the rectangle.
    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |y| (self.left..self.left + self.width).map(move |x| y * self.frame_w + x))
    }
}

/// Random rectangle covering a quarter to half of the frame, aspect within [0.5, 2].
pub fn make_region_mask(h: usize, w: usize, rng: &mut impl Rng) -> Result<RegionMask> {
    if h < 4 || w < 4 {
        return Err(Error::arg(format!("region mask needs a frame of at least 4×4, got {h}×{w}")));
    }
    let area = (h * w) as f64;
    let ratio: f64 = rng.random_range(0.25..=0.5);
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let min_h = 2.max(h.div_ceil(4));
    let height = ((ratio * area * aspect).sqrt().round() as usize).clamp(min_h, h);
    // width range that keeps the area ratio inside [0.25, 0.5] for this height
    let w_lo = 2.max((0.25 * area / height as f64).ceil() as usize);
    let w_hi = w.min((0.5 * area / height as f64).floor() as usize);
    let width = ((ratio * area / height as f64).round() as usize).clamp(w_lo, w_hi);
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    Ok(RegionMask {
        top,
        left,
        height,
        width,
        frame_h: h,
        frame_w: w,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutmixTrigger {
    /// Fire iff r > γ̄.
    #[default]
    Prose,
    /// Fire iff r < γ̄.
    ProbabilityMean,
}

impl CutmixTrigger {
    pub fn fires(self, r: f64, mean_gamma: f64) -> bool {
        match self {
            CutmixTrigger::Prose => r > mean_gamma,
            CutmixTrigger::ProbabilityMean => r < mean_gamma,
        }
    }
}

/// Who is pasted into whom. `partners[m] = Some(n)` means instance m receives
/// the region `masks[m]` from instance n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutmixPlan {
    pub triggered: bool,
    pub partners: Vec<Option<usize>>,
    pub masks: Vec<Option<RegionMask>>,
}

impl CutmixPlan {
    pub fn untriggered(n: usize) -> Self {
        Self {
            triggered: false,
            partners: vec![None; n],
            masks: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.partners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partners.is_empty()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::dim(format!("cutmix plan covers {} instances, got {n}", self.len())));
        }
        Ok(())
    }

    fn pixel_sources(&self, m: usize) -> Option<(usize, &RegionMask)> {
        match (self.partners[m], &self.masks[m]) {
            (Some(n), Some(mask)) if n != m => Some((n, mask)),
            _ => None,
        }
    }

    pub fn apply_images(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        self.check_len(images.len())?;
        let mut out = images.to_vec();
        for m in 0..images.len() {
            let Some((n, mask)) = self.pixel_sources(m) else { continue };
            let src = &images[n];
            if !src.same_shape(&images[m]) || (mask.frame_h, mask.frame_w) != (src.height(), src.width()) {
                return Err(Error::dim("cutmix partners differ in shape"));
            }
            let plane = src.height() * src.width();
            let dst = out[m].data_mut();
            for c in 0..src.channels() {
                for j in mask.pixels() {
                    dst[c * plane + j] = src.data()[c * plane + j];
                }
            }
        }
        Ok(out)
    }

    pub fn apply_probs(&self, maps: &[ProbMap]) -> Result<Vec<ProbMap>> {
        self.check_len(maps.len())?;
        let mut out = maps.to_vec();
        for m in 0..maps.len() {
            let Some((n, mask)) = self.pixel_sources(m) else { continue };
            let src = &maps[n];
            if !src.same_shape(&maps[m]) || (mask.frame_h, mask.frame_w) != (src.height(), src.width()) {
                return Err(Error::dim("cutmix partners differ in shape"));
            }
            for j in mask.pixels() {
                out[m].copy_pixel_from(src, j);
            }
        }
        Ok(out)
    }

    pub fn apply_labels(&self, labels: &[LabelMap]) -> Result<Vec<LabelMap>> {
        self.check_len(labels.len())?;
        let mut out = labels.to_vec();
        for m in 0..labels.len() {
            let Some((n, mask)) = self.pixel_sources(m) else { continue };
            let src = &labels[n];
            if (src.height(), src.width()) != (mask.frame_h, mask.frame_w)
                || (labels[m].height(), labels[m].width()) != (mask.frame_h, mask.frame_w)
            {
                return Err(Error::dim("cutmix partners differ in shape"));
            }
            let dst = out[m].data_mut();
            for j in mask.pixels() {
                dst[j] = src.data()[j];
            }
        }
        Ok(out)
    }
}

/// Easiest↔hardest pairing: rank k in ascending γ is matched with rank k in descending γ.
pub fn hardness_pairs(reports: &[HardnessReport]) -> Result<Vec<(usize, usize)>> {
    let (asc, desc) = sort_by_hardness(reports)?;
    Ok(asc.into_iter().zip(desc).collect())
}

fn sample_masks(partners: &[Option<usize>], h: usize, w: usize, rng: &mut impl Rng) -> Result<Vec<Option<RegionMask>>> {
    partners
        .iter()
        .enumerate()
        .map(|(m, p)| match p {
            Some(n) if *n != m => make_region_mask(h, w, rng).map(Some),
            _ => Ok(None),
        })
        .collect()
}

/// Decides whether the batch is mixed and, if so, draws the hard–easy pairs
/// and one independent mask per receiving instance.
pub fn plan_adaptive_cutmix(
    reports: &[HardnessReport],
    h: usize,
    w: usize,
    trigger: CutmixTrigger,
    rng: &mut impl Rng,
) -> Result<CutmixPlan> {
    let n = reports.len();
    let r: f64 = rng.random();
    if n == 0 || !trigger.fires(r, mean_gamma(reports)) {
        return Ok(CutmixPlan::untriggered(n));
    }
    let mut partners = vec![None; n];
    for (m, k) in hardness_pairs(reports)? {
        partners[m] = Some(k);
    }
    let masks = sample_masks(&partners, h, w, rng)?;
    Ok(CutmixPlan {
        triggered: true,
        partners,
        masks,
    })
}

/// Plain consistency-regularisation CutMix: fires with probability `prob`,
/// partners are a random permutation.
pub fn plan_random_cutmix(n: usize, h: usize, w: usize, prob: f64, rng: &mut impl Rng) -> Result<CutmixPlan> {
    let r: f64 = rng.random();
    if n == 0 || r >= prob {
        return Ok(CutmixPlan::untriggered(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let partners: Vec<Option<usize>> = perm.into_iter().map(Some).collect();
    let masks = sample_masks(&partners, h, w, rng)?;
    Ok(CutmixPlan {
        triggered: true,
        partners,
        masks,
    })
}

/// Mixes weak images and their teacher maps with hard–easy pairs.
pub fn adaptive_cutmix(
    images: &[ImageTensor],
    pseudo: &[ProbMap],
    reports: &[HardnessReport],
    trigger: CutmixTrigger,
    rng: &mut impl Rng,
) -> Result<(Vec<ImageTensor>, Vec<ProbMap>, CutmixPlan)> {
    if images.len() != pseudo.len() || images.len() != reports.len() {
        return Err(Error::dim(format!(
            "cutmix inputs disagree in length: {} images, {} maps, {} reports",
            images.len(),
            pseudo.len(),
            reports.len()
        )));
    }
    let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    for (img, p) in images.iter().zip(pseudo) {
        if (img.height(), img.width()) != (h, w) || (p.height(), p.width()) != (h, w) {
            return Err(Error::dim("cutmix inputs are not spatially aligned"));
        }
    }
    let plan = plan_adaptive_cutmix(reports, h, w, trigger, rng)?;
    if !plan.triggered {
        return Ok((images.to_vec(), pseudo.to_vec(), plan));
    }
    Ok((plan.apply_images(images)?, plan.apply_probs(pseudo)?, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reports(g: &[f64]) -> Vec<HardnessReport> {
        g.iter().map(|&g| HardnessReport::from_gamma(g)).collect()
    }

    /// Image whose every value encodes its instance id.
    fn tagged(id: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::filled(3, h, w, id as f32 / 16.0)
    }

    #[test]
    fn minimal_frame_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = make_region_mask(4, 4, &mut rng).unwrap();
            assert!(m.height >= 2 && m.width >= 2);
            assert!(m.top + m.height <= 4 && m.left + m.width <= 4);
        }
        assert!(make_region_mask(3, 8, &mut rng).is_err());
    }

    #[test]
    fn mask_area_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let m = make_region_mask(32, 32, &mut rng).unwrap();
            let r = m.area_ratio();
            assert!((0.25..=0.5).contains(&r), "{m:?}");
            assert!(m.top + m.height <= 32 && m.left + m.width <= 32);
            let sum: usize = m.to_binary().iter().map(|&v| v as usize).sum();
            assert_eq!(sum, m.height * m.width);
        }
        // odd, non-square frames too
        for (h, w) in [(5, 9), (17, 6), (64, 20)] {
            for _ in 0..300 {
                let r = make_region_mask(h, w, &mut rng).unwrap().area_ratio();
                assert!((0.25..=0.5).contains(&r));
            }
        }
    }

    #[test]
    fn fully_hard_batch_never_triggers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<_> = (0..4).map(|i| tagged(i, 8, 8)).collect();
        let maps = vec![ProbMap::uniform(3, 8, 8); 4];
        for _ in 0..200 {
            let (out, _, plan) = adaptive_cutmix(&imgs, &maps, &reports(&[1.0; 4]), CutmixTrigger::Prose, &mut rng).unwrap();
            assert!(!plan.triggered);
            assert_eq!(out, imgs);
        }
    }

    #[test]
    fn trigger_rules() {
        assert!(CutmixTrigger::Prose.fires(0.6, 0.5));
        assert!(!CutmixTrigger::Prose.fires(0.4, 0.5));
        assert!(CutmixTrigger::ProbabilityMean.fires(0.4, 0.5));
        assert!(!CutmixTrigger::Prose.fires(1.0, 1.0));
    }

    #[test]
    fn empty_mask_leaves_target() {
        let imgs: Vec<_> = (0..2).map(|i| tagged(i, 6, 6)).collect();
        let plan = CutmixPlan {
            triggered: true,
            partners: vec![Some(1), Some(0)],
            masks: vec![Some(RegionMask::empty(6, 6)), make_region_mask(6, 6, &mut ChaCha8Rng::seed_from_u64(0)).ok()],
        };
        let out = plan.apply_images(&imgs).unwrap();
        assert_eq!(out[0], imgs[0]);
        assert_ne!(out[1], imgs[1]);
    }

    #[test]
    fn four_instance_provenance() {
        let (h, w) = (8, 8);
        let imgs: Vec<_> = (0..4).map(|i| tagged(i, h, w)).collect();
        let maps: Vec<_> = (0..4)
            .map(|i| ProbMap::one_hot(4, h, w, &vec![i; h * w]).unwrap())
            .collect();
        let reps = reports(&[0.1, 0.2, 0.8, 0.9]);
        assert_eq!(hardness_pairs(&reps).unwrap(), vec![(0, 3), (1, 2), (2, 1), (3, 0)]);
        // r is drawn from [0,1) and γ̄ = 0.5, so look for a seed that fires
        let mut fired = 0;
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, pseudo, plan) = adaptive_cutmix(&imgs, &maps, &reps, CutmixTrigger::Prose, &mut rng).unwrap();
            if !plan.triggered {
                continue;
            }
            fired += 1;
            for m in 0..4 {
                let n = plan.partners[m].unwrap();
                assert_eq!(n, 3 - m);
                let mask = plan.masks[m].unwrap().to_binary();
                for j in 0..h * w {
                    let src = if mask[j] == 1 { n } else { m };
                    for c in 0..3 {
                        assert_eq!(out[m].data()[c * h * w + j], src as f32 / 16.0);
                    }
                    assert_eq!(pseudo[m].argmax_at(j), (src, 1.0));
                }
            }
        }
        assert!(fired > 5);
    }

    #[test]
    fn pairing_matches_ranks_for_all_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for b in 1..=16 {
            let g: Vec<f64> = (0..b).map(|_| rng.random()).collect();
            let reps = reports(&g);
            let (asc, _) = sort_by_hardness(&reps).unwrap();
            let pairs = hardness_pairs(&reps).unwrap();
            for (k, (m, n)) in pairs.iter().enumerate() {
                assert_eq!(*m, asc[k]);
                assert_eq!(*n, asc[b - 1 - k]);
            }
            let plan = plan_adaptive_cutmix(&reports(&vec![0.0; b]), 8, 8, CutmixTrigger::Prose, &mut rng).unwrap();
            if b % 2 == 1 && plan.triggered {
                let mid = (0..b).find(|&m| plan.partners[m] == Some(m)).unwrap();
                assert!(plan.masks[mid].is_none());
            }
        }
    }

    #[test]
    fn length_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = vec![tagged(0, 8, 8); 2];
        let maps = vec![ProbMap::uniform(2, 8, 8); 3];
        assert!(matches!(
            adaptive_cutmix(&imgs, &maps, &reports(&[0.0, 0.0]), CutmixTrigger::Prose, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn random_cutmix_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fired = (0..2000)
            .filter(|_| plan_random_cutmix(4, 8, 8, 0.5, &mut rng).unwrap().triggered)
            .count();
        assert!((900..1100).contains(&fired), "{fired}");
    }
}
