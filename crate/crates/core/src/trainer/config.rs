use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{BlendDirection, CutmixTrigger};
use crate::error::{Error, Result};
use crate::loss::PseudoLabel;
use crate::model::SegNetConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Labelled loss only; the teacher mirrors the student.
    Supervised,
    /// Unweighted consistency with fixed-strength strong views.
    StandardCr,
    /// Hardness-adaptive augmentation and loss weighting.
    #[default]
    Imas,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::StandardCr => "standard_cr",
            Mode::Imas => "imas",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "standard_cr" => Ok(Mode::StandardCr),
            "imas" => Ok(Mode::Imas),
            _ => Err(Error::arg(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub tau: f64,
    pub lambda_u: f64,
    pub alpha: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub blend_direction: BlendDirection,
    pub cutmix_trigger: CutmixTrigger,
    /// CutMix probability of the standard consistency baseline.
    pub baseline_cutmix_prob: f64,
    pub pseudo_label: PseudoLabel,
    /// Evaluate every this many epochs (and always after the last one).
    pub eval_every: usize,
    /// Report the teacher instead of the student as `val_miou`.
    pub eval_teacher: bool,
    pub widths: [usize; 3],
    /// Stop after this global step (the schedule still spans all epochs).
    pub halt_after: Option<u64>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Imas,
            tau: 0.95,
            lambda_u: 3.0,
            alpha: 0.996,
            batch_labeled: 8,
            batch_unlabeled: 8,
            epochs: 40,
            base_lr: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            seed: 0,
            blend_direction: BlendDirection::Prose,
            cutmix_trigger: CutmixTrigger::Prose,
            baseline_cutmix_prob: 0.5,
            pseudo_label: PseudoLabel::Hard,
            eval_every: 5,
            eval_teacher: false,
            widths: [16, 32, 64],
            halt_after: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0,1], got {}", self.tau));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad(format!("lambda_u must be ≥ 0, got {}", self.lambda_u));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be ≥ 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.poly_power > 0.0) {
            return bad(format!("poly_power must be positive, got {}", self.poly_power));
        }
        if !(0.0..=1.0).contains(&self.baseline_cutmix_prob) {
            return bad(format!("baseline_cutmix_prob must lie in [0,1], got {}", self.baseline_cutmix_prob));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, k: usize) -> SegNetConfig {
        SegNetConfig {
            widths: self.widths,
            ..SegNetConfig::new(k)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serialises")
    }
}
