//! Supervised, standard consistency, and hardness-weighted consistency losses.
//!
//! Every loss is a weighted sum of per-pixel cross-entropies, so each is
//! built once as [`PixelTerms`] (targets plus weights) and then evaluated
//! either on probability maps (`value`) or on logits inside a tape (`attach`).
//! Both paths share the targets and weights and agree to float precision.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardness::HardnessReport;
use crate::maps::{LabelMap, ProbMap, IGNORE};
use crate::tensor::{cross_entropy_value, Scalar, Tape, TargetMap, Var};

/// How teacher probabilities become targets at confident pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    /// One-hot at the argmax class.
    #[default]
    Hard,
    /// The teacher distribution itself.
    Soft,
}

/// Targets and per-pixel weights for one H×W map.
#[derive(Clone, Debug)]
pub struct PixelTerms {
    pub targets: Arc<TargetMap>,
    pub weights: Arc<[f64]>,
}

impl PixelTerms {
    pub fn pixels(&self) -> usize {
        self.weights.len()
    }

    /// Number of pixels that enter the sum.
    pub fn active(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    pub fn is_null(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    /// `Σ_j w_j · H(pred(j), t_j)` on a probability map.
    pub fn value(&self, pred: &ProbMap) -> Result<f64> {
        if pred.pixels() != self.pixels() {
            return Err(Error::dim(format!(
                "prediction has {} pixels, terms cover {}",
                pred.pixels(),
                self.pixels()
            )));
        }
        let mut total = 0.0;
        for (j, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            total += w * cross_entropy_value(&pred.pixel(j), self.targets.at(j));
        }
        Ok(total)
    }

    /// The same sum as a tape node over K×H×W logits.
    pub fn attach<T: Scalar>(&self, tape: &mut Tape<T>, logits: Var) -> Result<Var> {
        tape.weighted_cross_entropy(logits, Arc::clone(&self.targets), Arc::clone(&self.weights))
    }
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: {a} vs {b} instances")));
    }
    Ok(())
}

/// Per-image mean cross-entropy over labelled pixels, scaled by `1/B`.
/// Images without a valid pixel contribute nothing.
pub fn supervised_terms(labels: &[LabelMap], classes: usize) -> Result<Vec<PixelTerms>> {
    let b = labels.len() as f64;
    labels
        .iter()
        .map(|lab| {
            let mut targets = Vec::with_capacity(lab.data().len());
            let mut valid = 0usize;
            for &v in lab.data() {
                if v == IGNORE {
                    targets.push(0);
                } else if (v as usize) < classes {
                    targets.push(v as u32);
                    valid += 1;
                } else {
                    return Err(Error::arg(format!("label {v} out of range for K={classes}")));
                }
            }
            let w = if valid == 0 { 0.0 } else { 1.0 / (valid as f64 * b) };
            let weights: Arc<[f64]> = lab.data().iter().map(|&v| if v == IGNORE { 0.0 } else { w }).collect();
            Ok(PixelTerms {
                targets: Arc::new(TargetMap::Hard(targets)),
                weights,
            })
        })
        .collect()
}

/// Confidence-masked pseudo-label terms for one teacher map, each confident
/// pixel weighted by `scale`.
pub fn pseudo_terms(teacher: &ProbMap, tau: f64, scale: f64, mode: PseudoLabel) -> PixelTerms {
    let hw = teacher.pixels();
    let mut hard = Vec::with_capacity(hw);
    let mut weights = Vec::with_capacity(hw);
    for j in 0..hw {
        let (c, m) = teacher.argmax_at(j);
        hard.push(c as u32);
        weights.push(if m as f64 >= tau { scale } else { 0.0 });
    }
    let targets = match mode {
        PseudoLabel::Hard => TargetMap::Hard(hard),
        PseudoLabel::Soft => {
            let k = teacher.classes();
            let mut probs = vec![0.0f32; k * hw];
            for j in 0..hw {
                for c in 0..k {
                    probs[j * k + c] = teacher.prob(c, j);
                }
            }
            TargetMap::Soft { classes: k, probs }
        }
    };
    PixelTerms {
        targets: Arc::new(targets),
        weights: weights.into(),
    }
}

/// Terms of the standard consistency loss: `(1/B)·(1/HW)` per confident pixel.
pub fn standard_unsup_terms(teachers: &[ProbMap], tau: f64, mode: PseudoLabel) -> Vec<PixelTerms> {
    let b = teachers.len() as f64;
    teachers
        .iter()
        .map(|t| pseudo_terms(t, tau, 1.0 / (b * t.pixels() as f64), mode))
        .collect()
}

/// Terms of the hardness-weighted loss for both strong branches. Instance i
/// gets `(1−γ_i)/(2·HW·B)` per confident pixel in each branch.
pub fn adaptive_unsup_terms(
    targets_i: &[ProbMap],
    targets_c: &[ProbMap],
    reports: &[HardnessReport],
    tau: f64,
    mode: PseudoLabel,
) -> Result<(Vec<PixelTerms>, Vec<PixelTerms>)> {
    check_lengths("branch targets", targets_i.len(), targets_c.len())?;
    check_lengths("targets and reports", targets_i.len(), reports.len())?;
    let b = reports.len() as f64;
    let mut ti = Vec::with_capacity(reports.len());
    let mut tc = Vec::with_capacity(reports.len());
    for ((pi, pc), r) in targets_i.iter().zip(targets_c).zip(reports) {
        if !pi.same_shape(pc) {
            return Err(Error::dim("branch targets differ in shape"));
        }
        let scale = r.easiness() / (2.0 * pi.pixels() as f64 * b);
        ti.push(pseudo_terms(pi, tau, scale, mode));
        tc.push(pseudo_terms(pc, tau, scale, mode));
    }
    Ok((ti, tc))
}

/// Sum of term values over aligned predictions.
pub fn terms_value(terms: &[PixelTerms], preds: &[ProbMap]) -> Result<f64> {
    check_lengths("predictions and terms", preds.len(), terms.len())?;
    terms.iter().zip(preds).map(|(t, p)| t.value(p)).sum()
}

/// Sum of term nodes over aligned logits; null terms are skipped.
pub fn terms_graph<T: Scalar>(tape: &mut Tape<T>, terms: &[PixelTerms], logits: &[Var]) -> Result<Option<Var>> {
    check_lengths("logits and terms", logits.len(), terms.len())?;
    let mut nodes = Vec::new();
    for (t, &z) in terms.iter().zip(logits) {
        if !t.is_null() {
            nodes.push(t.attach(tape, z)?);
        }
    }
    if nodes.is_empty() {
        return Ok(None);
    }
    tape.sum_scalars(&nodes).map(Some)
}

pub fn supervised_loss(preds: &[ProbMap], labels: &[LabelMap]) -> Result<f64> {
    check_lengths("supervised loss", preds.len(), labels.len())?;
    let k = preds.first().map_or(2, ProbMap::classes);
    terms_value(&supervised_terms(labels, k)?, preds)
}

pub fn standard_unsup_loss(student: &[ProbMap], teacher: &[ProbMap], tau: f64) -> Result<f64> {
    check_lengths("consistency loss", student.len(), teacher.len())?;
    terms_value(&standard_unsup_terms(teacher, tau, PseudoLabel::Hard), student)
}

/// The consistency part of a [`LossBreakdown`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnsupBreakdown {
    pub l_u: f64,
    pub per_instance_weights: Vec<f64>,
    pub confident_fraction_i: f64,
    pub confident_fraction_c: f64,
}

impl UnsupBreakdown {
    pub fn new(l_u: f64, reports: &[HardnessReport], targets_i: &[ProbMap], targets_c: &[ProbMap], tau: f64) -> Self {
        Self {
            l_u,
            per_instance_weights: reports.iter().map(HardnessReport::easiness).collect(),
            confident_fraction_i: confident_fraction(targets_i, tau),
            confident_fraction_c: confident_fraction(targets_c, tau),
        }
    }
}

/// Fraction of pixels across the batch whose top probability is at least `tau`.
pub fn confident_fraction(maps: &[ProbMap], tau: f64) -> f64 {
    let (mut hit, mut all) = (0usize, 0usize);
    for m in maps {
        all += m.pixels();
        hit += m.max_probs().iter().filter(|&&p| p as f64 >= tau).count();
    }
    if all == 0 {
        0.0
    } else {
        hit as f64 / all as f64
    }
}

pub fn adaptive_unsup_loss(
    preds_i: &[ProbMap],
    targets_i: &[ProbMap],
    preds_c: &[ProbMap],
    targets_c: &[ProbMap],
    reports: &[HardnessReport],
    tau: f64,
) -> Result<UnsupBreakdown> {
    let (ti, tc) = adaptive_unsup_terms(targets_i, targets_c, reports, tau, PseudoLabel::Hard)?;
    let l_u = terms_value(&ti, preds_i)? + terms_value(&tc, preds_c)?;
    Ok(UnsupBreakdown::new(l_u, reports, targets_i, targets_c, tau))
}

pub fn total_loss(l_x: f64, l_u: f64, lambda_u: f64) -> f64 {
    l_x + lambda_u * l_u
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_x: f64,
    pub l_u: f64,
    pub total: f64,
    pub per_instance_weights: Vec<f64>,
    pub confident_fraction_i: f64,
    pub confident_fraction_c: f64,
}

impl LossBreakdown {
    pub fn new(l_x: f64, unsup: UnsupBreakdown, lambda_u: f64) -> Self {
        Self {
            l_x,
            l_u: unsup.l_u,
            total: total_loss(l_x, unsup.l_u, lambda_u),
            per_instance_weights: unsup.per_instance_weights,
            confident_fraction_i: unsup.confident_fraction_i,
            confident_fraction_c: unsup.confident_fraction_c,
        }
    }

    pub fn supervised_only(l_x: f64) -> Self {
        Self {
            l_x,
            l_u: 0.0,
            total: l_x,
            per_instance_weights: Vec::new(),
            confident_fraction_i: 0.0,
            confident_fraction_c: 0.0,
        }
    }
}
