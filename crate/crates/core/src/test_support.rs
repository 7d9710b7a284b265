use rand::Rng;

use crate::maps::ProbMap;

/// Softmax of uniform logits in `[-sharp, sharp)`; larger `sharp` gives more confident pixels.
pub(crate) fn random_map(rng: &mut impl Rng, k: usize, h: usize, w: usize, sharp: f32) -> ProbMap {
    let hw = h * w;
    let mut data = vec![0.0f32; k * hw];
    for j in 0..hw {
        let logits: Vec<f32> = (0..k).map(|_| rng.random_range(-sharp..sharp)).collect();
        let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f32 = e.iter().sum();
        for c in 0..k {
            data[c * hw + j] = e[c] / s;
        }
    }
    ProbMap::new(k, h, w, data).unwrap()
}
