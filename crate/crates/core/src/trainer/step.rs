use rayon::prelude::*;

use super::config::{Mode, TrainConfig};
use crate::augment::{
    adaptive_blend, adaptive_cutmix, blend, intensity_strong, plan_random_cutmix, weak_augment, AugRecord, CutmixPlan,
    WeakAugConfig,
};
use crate::data::{LabeledSample, UnlabeledSample};
use crate::error::{Error, Result};
use crate::hardness::{evaluate_hardness, HardnessReport};
use crate::loss::{
    adaptive_unsup_terms, confident_fraction, supervised_terms, terms_graph, LossBreakdown, PixelTerms,
    UnsupBreakdown,
};
use crate::maps::{ImageTensor, LabelMap, ProbMap};
use crate::model::{ModelPair, ParamVars, SegNet};
use crate::rng::{substream, Stream};
use crate::tensor::{Scalar, Sgd, Tape, Tensor, Var};

/// Everything random or teacher-derived in one step, fixed before the
/// student graph is built. The training loss is a deterministic function of
/// the student parameters given a plan.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub step: u64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub labeled_views: Vec<ImageTensor>,
    pub labeled_targets: Vec<LabelMap>,
    pub sup_terms: Vec<PixelTerms>,
    pub branch_i: Vec<ImageTensor>,
    pub branch_c: Vec<ImageTensor>,
    pub teacher_i: Vec<ProbMap>,
    pub teacher_c: Vec<ProbMap>,
    pub terms_i: Vec<PixelTerms>,
    pub terms_c: Vec<PixelTerms>,
    pub reports: Vec<HardnessReport>,
    pub records: Vec<AugRecord>,
    pub cutmix: CutmixPlan,
}

/// Scalar nodes of the step loss.
pub struct LossNodes {
    pub params: ParamVars,
    pub total: Var,
    pub sup: Option<Var>,
    pub unsup: Option<Var>,
}

fn tensor<T: Scalar>(img: &ImageTensor) -> Tensor<T> {
    img.to_tensor()
}

impl StepPlan {
    /// Weak views, teacher and student predictions on them, hardness, and
    /// both strong branches, with every draw keyed by `(seed, step, instance)`.
    pub fn build(
        pair: &ModelPair,
        labeled: &[LabeledSample],
        unlabeled: &[UnlabeledSample],
        cfg: &TrainConfig,
        crop: usize,
        step: u64,
    ) -> Result<Self> {
        let seed = cfg.seed;
        let k = pair.student.num_classes();
        let weak_cfg = WeakAugConfig::new(crop);

        let lab: Vec<(ImageTensor, LabelMap)> = labeled
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = substream(seed, Stream::WeakLabeled, step, i as u64);
                let (img, lab, _) = weak_augment(&s.image, Some(&s.label), &weak_cfg, &mut rng)?;
                Ok((img, lab.expect("label was supplied")))
            })
            .collect::<Result<_>>()?;
        let (labeled_views, labeled_targets): (Vec<_>, Vec<_>) = lab.into_iter().unzip();
        let sup_terms = supervised_terms(&labeled_targets, k)?;

        let mut plan = StepPlan {
            step,
            labeled_ids: labeled.iter().map(|s| s.id.clone()).collect(),
            unlabeled_ids: unlabeled.iter().map(|s| s.id.clone()).collect(),
            labeled_views,
            labeled_targets,
            sup_terms,
            branch_i: Vec::new(),
            branch_c: Vec::new(),
            teacher_i: Vec::new(),
            teacher_c: Vec::new(),
            terms_i: Vec::new(),
            terms_c: Vec::new(),
            reports: Vec::new(),
            records: Vec::new(),
            cutmix: CutmixPlan::untriggered(0),
        };
        if cfg.mode == Mode::Supervised {
            return Ok(plan);
        }

        // one weak view per unlabelled instance feeds hardness and both branches
        let weak: Vec<(ImageTensor, AugRecord, ProbMap, HardnessReport)> = unlabeled
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = substream(seed, Stream::WeakUnlabeled, step, i as u64);
                let (view, _, rec) = weak_augment(&s.image, None, &weak_cfg, &mut rng)?;
                let p_t = pair.teacher.predict(&view)?;
                let p_s = pair.student.predict(&view)?;
                let report = evaluate_hardness(&p_t, &p_s, cfg.tau)?;
                Ok((view, rec, p_t, report))
            })
            .collect::<Result<_>>()?;
        let mut views = Vec::with_capacity(weak.len());
        for (view, rec, p_t, report) in weak {
            views.push(view);
            plan.records.push(rec);
            plan.teacher_i.push(p_t);
            plan.reports.push(report);
        }

        plan.branch_i = views
            .par_iter()
            .zip(&plan.reports)
            .enumerate()
            .map(|(i, (view, r))| {
                let mut rng = substream(seed, Stream::Intensity, step, i as u64);
                let (strong, _) = intensity_strong(view, &mut rng);
                match cfg.mode {
                    Mode::Imas => adaptive_blend(&strong, view, r.gamma, cfg.blend_direction),
                    _ => blend(&strong, view, 1.0),
                }
            })
            .collect::<Result<_>>()?;

        let mut rng = substream(seed, Stream::Cutmix, step, 0);
        let (branch_c, teacher_c, cutmix) = match cfg.mode {
            Mode::Imas => adaptive_cutmix(&views, &plan.teacher_i, &plan.reports, cfg.cutmix_trigger, &mut rng)?,
            _ => {
                let cm = plan_random_cutmix(views.len(), crop, crop, cfg.baseline_cutmix_prob, &mut rng)?;
                (cm.apply_images(&views)?, cm.apply_probs(&plan.teacher_i)?, cm)
            }
        };
        for (m, rec) in plan.records.iter_mut().enumerate() {
            if let (Some(n), Some(mask)) = (cutmix.partners[m], cutmix.masks[m]) {
                rec.cutmix = Some((n, mask));
            }
        }
        plan.branch_c = branch_c;
        plan.teacher_c = teacher_c;
        plan.cutmix = cutmix;

        let weights: Vec<HardnessReport> = match cfg.mode {
            Mode::Imas => plan.reports.clone(),
            _ => vec![HardnessReport::from_gamma(0.0); plan.reports.len()],
        };
        let (ti, tc) = adaptive_unsup_terms(&plan.teacher_i, &plan.teacher_c, &weights, cfg.tau, cfg.pseudo_label)?;
        plan.terms_i = ti;
        plan.terms_c = tc;
        Ok(plan)
    }

    /// Builds `L_x + λ_u·L_u` on `tape` as a function of `net`'s parameters.
    pub fn loss_graph<T: Scalar>(&self, net: &SegNet<T>, tape: &mut Tape<T>, lambda_u: f64) -> Result<LossNodes> {
        let params = net.bind(tape);
        let forward = |tape: &mut Tape<T>, imgs: &[ImageTensor], terms: &[PixelTerms]| -> Result<Vec<Var>> {
            imgs.iter()
                .zip(terms)
                .map(|(img, t)| {
                    if t.is_null() {
                        // never attached; any placeholder var will do
                        return Ok(params.0[0]);
                    }
                    let x = tape.constant(tensor(img));
                    net.forward_on(tape, &params, x)
                })
                .collect()
        };
        let zx = forward(tape, &self.labeled_views, &self.sup_terms)?;
        let zi = forward(tape, &self.branch_i, &self.terms_i)?;
        let zc = forward(tape, &self.branch_c, &self.terms_c)?;
        let sup = terms_graph(tape, &self.sup_terms, &zx)?;
        let ui = terms_graph(tape, &self.terms_i, &zi)?;
        let uc = terms_graph(tape, &self.terms_c, &zc)?;
        let unsup = match (ui, uc) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (a, b) => a.or(b),
        };
        let weighted = unsup.map(|u| tape.scale(u, T::from_f64_lossy(lambda_u))).transpose()?;
        let total = match (sup, weighted) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => tape.constant(Tensor::scalar(T::zero())),
        };
        Ok(LossNodes { params, total, sup, unsup })
    }

    /// Loss value without recording gradients.
    pub fn loss_value<T: Scalar>(&self, net: &SegNet<T>, lambda_u: f64) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let nodes = self.loss_graph(net, &mut tape, lambda_u)?;
        Ok(tape.value(nodes.total).item().to_f64().unwrap_or(f64::NAN))
    }

    /// Loss and its gradient for every parameter tensor, in parameter order.
    pub fn loss_and_grads<T: Scalar>(&self, net: &SegNet<T>, lambda_u: f64) -> Result<(LossNodesValue, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let nodes = self.loss_graph(net, &mut tape, lambda_u)?;
        let grads = tape.backward(nodes.total)?;
        let per_param = nodes
            .params
            .0
            .iter()
            .zip(net.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
            .collect();
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64().unwrap_or(f64::NAN));
        Ok((
            LossNodesValue {
                total: val(Some(nodes.total)),
                sup: val(nodes.sup),
                unsup: val(nodes.unsup),
            },
            per_param,
        ))
    }

    pub fn instance_ids(&self) -> Vec<String> {
        self.labeled_ids.iter().chain(&self.unlabeled_ids).cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossNodesValue {
    pub total: f64,
    pub sup: f64,
    pub unsup: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub reports: Vec<HardnessReport>,
    pub lr: f64,
    pub cutmix_triggered: bool,
}

/// Reports the one-based step number used in the metrics log.
fn abort(step0: u64, instances: Vec<String>) -> Error {
    Error::NumericAbort {
        step: step0 + 1,
        instances,
    }
}

/// One iteration: plan, student backward, SGD, then the teacher update.
pub fn train_step(
    pair: &mut ModelPair,
    sgd: &mut Sgd<f32>,
    labeled: &[LabeledSample],
    unlabeled: &[UnlabeledSample],
    cfg: &TrainConfig,
    crop: usize,
    step: u64,
) -> Result<StepOutcome> {
    let plan = match StepPlan::build(pair, labeled, unlabeled, cfg, crop, step) {
        Ok(p) => p,
        Err(Error::NonFinite { .. }) => {
            let ids = labeled.iter().map(|s| s.id.clone()).chain(unlabeled.iter().map(|s| s.id.clone()));
            return Err(abort(step, ids.collect()));
        }
        Err(e) => return Err(e),
    };
    let (values, grads) = match plan.loss_and_grads(&pair.student, cfg.lambda_u) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) => return Err(abort(step, plan.instance_ids())),
        Err(e) => return Err(e),
    };
    if !values.total.is_finite() {
        return Err(abort(step, plan.instance_ids()));
    }
    let lr = sgd.state.lr();
    match sgd.step(pair.student.params_mut(), &grads) {
        Err(Error::NonFinite { .. }) => return Err(abort(step, plan.instance_ids())),
        other => other?,
    }
    match cfg.mode {
        Mode::Supervised => pair.mirror_student(),
        _ => pair.ema_update()?,
    }
    let breakdown = if cfg.mode == Mode::Supervised {
        LossBreakdown::supervised_only(values.sup)
    } else {
        let weights = match cfg.mode {
            Mode::Imas => plan.reports.iter().map(HardnessReport::easiness).collect(),
            _ => vec![1.0; plan.reports.len()],
        };
        let unsup = UnsupBreakdown {
            l_u: values.unsup,
            per_instance_weights: weights,
            confident_fraction_i: confident_fraction(&plan.teacher_i, cfg.tau),
            confident_fraction_c: confident_fraction(&plan.teacher_c, cfg.tau),
        };
        LossBreakdown::new(values.sup, unsup, cfg.lambda_u)
    };
    Ok(StepOutcome {
        breakdown,
        reports: plan.reports,
        lr,
        cutmix_triggered: plan.cutmix.triggered,
    })
}
