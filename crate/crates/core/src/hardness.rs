//! Instance hardness from teacher/student disagreement.
//!
//! γ = 1 − [ρ_s/2 · wIoU(p_s, p_t) + ρ_t/2 · wIoU(p_t, p_s)], where ρ is the
//! fraction of confident pixels and wIoU a class-weighted IoU of argmax maps.
//!
//! wIoU is asymmetric: the confidence mask and the class weights both come
//! from its first argument. Weights are normalised inverse pixel counts of
//! the first argument's confident argmax, so rare classes count more.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::ProbMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardnessReport {
    pub gamma: f64,
    pub rho_s: f64,
    pub rho_t: f64,
    /// wIoU(p_s, p_t)
    pub wiou_st: f64,
    /// wIoU(p_t, p_s)
    pub wiou_ts: f64,
}

impl HardnessReport {
    pub fn easiness(&self) -> f64 {
        1.0 - self.gamma
    }

    /// Report carrying only a γ value; the constituents are zero.
    pub fn from_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            rho_s: 0.0,
            rho_t: 0.0,
            wiou_st: 0.0,
            wiou_ts: 0.0,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("tau must lie in (0,1], got {tau}")))
    }
}

#[inline]
fn confident(max_prob: f32, tau: f64) -> bool {
    max_prob as f64 >= tau
}

/// Fraction of pixels whose largest class probability is at least `tau`.
pub fn confidence_ratio(p: &ProbMap, tau: f64) -> f64 {
    let n = p.pixels();
    if n == 0 {
        return 0.0;
    }
    let count = (0..n).filter(|&j| confident(p.argmax_at(j).1, tau)).count();
    count as f64 / n as f64
}

/// Class-weighted IoU between the argmax maps of `z1` and `z2`, restricted to
/// the pixels where `z1` is confident.
pub fn weighted_iou(z1: &ProbMap, z2: &ProbMap, tau: f64) -> Result<f64> {
    if !z1.same_shape(z2) {
        return Err(Error::dim("weighted_iou: probability maps differ in shape"));
    }
    check_tau(tau)?;
    let k = z1.classes();
    let mut n_a = vec![0usize; k];
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    for j in 0..z1.pixels() {
        let (a, pa) = z1.argmax_at(j);
        if !confident(pa, tau) {
            continue;
        }
        let (b, _) = z2.argmax_at(j);
        n_a[a] += 1;
        if a == b {
            inter[a] += 1;
            union[a] += 1;
        } else {
            union[a] += 1;
            union[b] += 1;
        }
    }
    let norm: f64 = n_a.iter().filter(|&&n| n > 0).map(|&n| 1.0 / n as f64).sum();
    if norm == 0.0 {
        return Ok(0.0);
    }
    // normalise once so that perfect agreement gives exactly 1
    let weighted = (0..k)
        .filter(|&c| n_a[c] > 0)
        .map(|c| (1.0 / n_a[c] as f64) * (inter[c] as f64 / union[c] as f64))
        .sum::<f64>();
    Ok((weighted / norm).clamp(0.0, 1.0))
}

/// Hardness of one instance from the teacher and student predictions on the
/// same weak view.
pub fn evaluate_hardness(p_t: &ProbMap, p_s: &ProbMap, tau: f64) -> Result<HardnessReport> {
    if !p_t.same_shape(p_s) {
        return Err(Error::dim("evaluate_hardness: probability maps differ in shape"));
    }
    check_tau(tau)?;
    let rho_s = confidence_ratio(p_s, tau);
    let rho_t = confidence_ratio(p_t, tau);
    let wiou_st = weighted_iou(p_s, p_t, tau)?;
    let wiou_ts = weighted_iou(p_t, p_s, tau)?;
    let agreement = rho_s / 2.0 * wiou_st + rho_t / 2.0 * wiou_ts;
    Ok(HardnessReport {
        gamma: (1.0 - agreement).clamp(0.0, 1.0),
        rho_s,
        rho_t,
        wiou_st,
        wiou_ts,
    })
}

/// Batch indices ordered by ascending and by descending γ. Ties keep the
/// original index order in both sequences.
pub fn sort_by_hardness(reports: &[HardnessReport]) -> Result<(Vec<usize>, Vec<usize>)> {
    if reports.is_empty() {
        return Err(Error::arg("sort_by_hardness: empty batch"));
    }
    let mut asc: Vec<usize> = (0..reports.len()).collect();
    asc.sort_by(|&a, &b| reports[a].gamma.total_cmp(&reports[b].gamma));
    let mut desc: Vec<usize> = (0..reports.len()).collect();
    desc.sort_by(|&a, &b| reports[b].gamma.total_cmp(&reports[a].gamma));
    Ok((asc, desc))
}

pub fn mean_gamma(reports: &[HardnessReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.gamma).sum::<f64>() / reports.len() as f64
}

/// Population standard deviation of γ over a batch.
pub fn std_gamma(reports: &[HardnessReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    let m = mean_gamma(reports);
    (reports.iter().map(|r| (r.gamma - m).powi(2)).sum::<f64>() / reports.len() as f64).sqrt()
}

/// Header of the hardness log.
pub const CSV_HEADER: &str = "step,instance_id,gamma,rho_s,rho_t,wiou_st,wiou_ts";

pub fn csv_row(step: u64, instance_id: &str, r: &HardnessReport) -> String {
    format!(
        "{step},{instance_id},{},{},{},{},{}",
        r.gamma, r.rho_s, r.rho_t, r.wiou_st, r.wiou_ts
    )
}
