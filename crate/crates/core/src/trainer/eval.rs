use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::maps::{LabelMap, IGNORE};
use crate::model::SegNet;

/// `counts[truth][pred]` over labelled (non-ignored) pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, truth: &LabelMap, pred: &[usize]) -> Result<()> {
        if truth.data().len() != pred.len() {
            return Err(Error::dim("prediction and truth differ in size"));
        }
        for (&t, &p) in truth.data().iter().zip(pred) {
            if t == IGNORE {
                continue;
            }
            let t = t as usize;
            if t >= self.classes || p >= self.classes {
                return Err(Error::arg(format!("class out of range for K={}", self.classes)));
            }
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }

    /// IoU per class; `None` for classes absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|t| self.counts[t][c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// mIoU of `net` on full, un-augmented images.
pub fn evaluate_miou(net: &SegNet<f32>, samples: &[LabeledSample]) -> Result<MiouReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let k = net.num_classes();
    let parts: Vec<Confusion> = samples
        .par_iter()
        .map(|s| {
            let pred = net.predict(&s.image)?.argmax();
            let mut c = Confusion::new(k);
            c.add(&s.label, &pred)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut total = Confusion::new(k);
    for p in &parts {
        total.merge(p);
    }
    Ok(MiouReport {
        miou: total.miou(),
        per_class: total.class_iou(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let truth = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let mut c = Confusion::new(4);
        c.add(&truth, &[0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(c.miou(), 1.0);
        assert_eq!(c.class_iou()[3], None);
    }

    #[test]
    fn constant_background() {
        let truth = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let mut c = Confusion::new(3);
        c.add(&truth, &[0; 4]).unwrap();
        let iou = c.class_iou();
        assert_eq!(iou[1], Some(0.0));
        assert_eq!(iou[2], Some(0.0));
        assert_eq!(iou[0], Some(0.5));
    }

    #[test]
    fn ignore_pixels_skipped() {
        let truth = LabelMap::new(1, 3, vec![IGNORE, 1, 1]).unwrap();
        let mut c = Confusion::new(2);
        c.add(&truth, &[0, 1, 1]).unwrap();
        assert_eq!(c.miou(), 1.0);
    }
}
