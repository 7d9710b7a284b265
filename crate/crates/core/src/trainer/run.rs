use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::eval::{evaluate_miou, MiouReport};
use super::step::train_step;
use crate::data::{sample_indices, Dataset, LabeledSample, UnlabeledSample};
use crate::error::{Error, Result};
use crate::hardness::{self, mean_gamma, std_gamma};
use crate::model::{load_checkpoint, save_checkpoint, ModelPair};
use crate::rng::{substream, Stream};
use crate::tensor::Sgd;

pub const METRICS_HEADER: &str = "step,epoch,l_x,l_u,mean_gamma,std_gamma,lr,val_miou";
pub const EVAL_HEADER: &str = "step,epoch,student_miou,teacher_miou";

/// One line of the metrics CSV. Fields that do not apply are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub l_x: Option<f64>,
    pub l_u: Option<f64>,
    pub mean_gamma: Option<f64>,
    pub std_gamma: Option<f64>,
    pub lr: Option<f64>,
    pub val_miou: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            opt(self.l_x),
            opt(self.l_u),
            opt(self.mean_gamma),
            opt(self.std_gamma),
            opt(self.lr),
            opt(self.val_miou)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(Error::arg(format!("metrics row needs 8 fields: {line:?}")));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::arg(format!("bad number {s:?}")))
            }
        };
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::arg("bad step"))?,
            epoch: f[1].parse().map_err(|_| Error::arg("bad epoch"))?,
            l_x: num(f[2])?,
            l_u: num(f[3])?,
            mean_gamma: num(f[4])?,
            std_gamma: num(f[5])?,
            lr: num(f[6])?,
            val_miou: num(f[7])?,
        })
    }
}

/// Reads a metrics CSV written by [`run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub final_student: Option<MiouReport>,
    pub final_teacher: Option<MiouReport>,
    pub best_miou: Option<f64>,
    pub best_step: Option<u64>,
}

impl RunSummary {
    /// The reported final mIoU (student unless the run evaluated the teacher).
    pub fn final_miou(&self, teacher: bool) -> Option<f64> {
        let r = if teacher { &self.final_teacher } else { &self.final_student };
        r.as_ref().map(|r| r.miou)
    }
}

pub struct RunPaths {
    pub metrics: PathBuf,
    pub hardness: PathBuf,
    pub evals: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
    pub config: PathBuf,
    pub summary: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        Self {
            metrics: out.join("metrics.csv"),
            hardness: out.join("hardness.csv"),
            evals: out.join("eval.csv"),
            best: out.join("best.ckpt"),
            last: out.join("final.ckpt"),
            config: out.join("config.json"),
            summary: out.join("summary.json"),
        }
    }
}

struct Csv {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Csv {
    fn open(path: &Path, header: &str, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = if append {
            OpenOptions::new().create(true).append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        let mut csv = Self {
            path: path.to_path_buf(),
            w: BufWriter::new(file),
        };
        if !(append && exists) {
            csv.line(header)?;
        }
        Ok(csv)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn steps_per_epoch(n_unlabeled: usize, batch: usize) -> u64 {
    n_unlabeled.div_ceil(batch).max(1) as u64
}

/// Unlabelled indices for a global step: each epoch walks one permutation,
/// wrapping to its start to fill the last batch.
fn unlabeled_indices(seed: u64, n: usize, batch: usize, spe: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let epoch = step / spe;
    let within = (step % spe) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut substream(seed, Stream::UnlabeledOrder, epoch, 0));
    (0..batch).map(|b| perm[(within * batch + b) % n]).collect()
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("IMAS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("IMAS_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Evaluates both networks, logs them, and returns the reported mIoU.
fn evaluate(
    pair: &ModelPair,
    val: &[LabeledSample],
    evals: &mut Csv,
    step: u64,
    epoch: usize,
    teacher: bool,
    summary: &mut RunSummary,
) -> Result<f64> {
    let s = evaluate_miou(&pair.student, val)?;
    let t = evaluate_miou(&pair.teacher, val)?;
    evals.line(&format!("{step},{epoch},{},{}", s.miou, t.miou))?;
    let reported = if teacher { t.miou } else { s.miou };
    summary.final_student = Some(s);
    summary.final_teacher = Some(t);
    Ok(reported)
}

fn track_best(path: &Path, pair: &ModelPair, sgd: &Sgd<f32>, miou: f64, step: u64, summary: &mut RunSummary) -> Result<()> {
    if summary.best_miou.is_none_or(|b| miou > b) {
        summary.best_miou = Some(miou);
        summary.best_step = Some(step);
        save_checkpoint(path, pair, &sgd.state)?;
    }
    Ok(())
}

/// Full schedule over `data`, writing CSVs and checkpoints into `out`.
pub fn run(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<RunSummary> {
    thread_pool()?.install(|| run_inner(cfg, data, out))
}

fn run_inner(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Config("training needs at least one labelled instance".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("training needs a non-empty validation set".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = RunPaths::new(out);
    fs::write(&paths.config, cfg.to_json() + "\n").map_err(|e| Error::io(&paths.config, e))?;

    let k = data.manifest.k;
    let crop = data.manifest.crop;
    let spe = steps_per_epoch(data.unlabeled.len(), cfg.batch_unlabeled);
    let total_steps = (cfg.epochs as u64 * spe).max(1);

    let (mut pair, mut sgd, resumed) = match &cfg.resume {
        Some(ckpt) => {
            let (pair, state) = load_checkpoint(ckpt)?;
            if pair.student.config() != &cfg.model_config(k) {
                return Err(Error::Config("checkpoint architecture differs from the config".into()));
            }
            if state.total_steps != total_steps {
                return Err(Error::Config(format!(
                    "checkpoint schedule spans {} steps, config {}",
                    state.total_steps, total_steps
                )));
            }
            (pair, Sgd::from_state(state), true)
        }
        None => {
            let pair = ModelPair::init(cfg.model_config(k), cfg.seed, cfg.alpha)?;
            let sgd = Sgd::new(pair.student.params(), cfg.base_lr, cfg.momentum, cfg.poly_power, total_steps)?;
            (pair, sgd, false)
        }
    };

    let mut metrics = Csv::open(&paths.metrics, METRICS_HEADER, resumed)?;
    let mut hard_csv = Csv::open(&paths.hardness, hardness::CSV_HEADER, resumed)?;
    let mut evals = Csv::open(&paths.evals, EVAL_HEADER, resumed)?;

    let mut summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        steps: sgd.state.step_count,
        total_steps,
        steps_per_epoch: spe,
        final_student: None,
        final_teacher: None,
        best_miou: None,
        best_step: None,
    };

    if resumed && paths.metrics.exists() {
        // the best checkpoint so far stays best until beaten
        for r in read_metrics(&paths.metrics)? {
            if let Some(m) = r.val_miou.filter(|_| r.step <= summary.steps) {
                if summary.best_miou.is_none_or(|b| m > b) {
                    summary.best_miou = Some(m);
                    summary.best_step = Some(r.step);
                }
            }
        }
    }
    if !resumed {
        let miou = evaluate(&pair, &data.val, &mut evals, 0, 0, cfg.eval_teacher, &mut summary)?;
        metrics.line(
            &MetricsRow {
                step: 0,
                epoch: 0,
                l_x: None,
                l_u: None,
                mean_gamma: None,
                std_gamma: None,
                lr: None,
                val_miou: Some(miou),
            }
            .to_csv(),
        )?;
        track_best(&paths.best, &pair, &sgd, miou, 0, &mut summary)?;
    }

    let stop = cfg.halt_after.map_or(total_steps, |h| h.min(total_steps));
    let epochs_end = if cfg.epochs == 0 { 0 } else { total_steps };
    while sgd.state.step_count < stop.min(epochs_end) {
        let step0 = sgd.state.step_count; // zero-based index of this step
        let step = step0 + 1;
        let epoch = (step0 / spe) as usize + 1;

        let mut lrng = substream(cfg.seed, Stream::LabeledBatch, step0, 0);
        let lab: Vec<LabeledSample> = sample_indices(data.labeled.len(), cfg.batch_labeled, &mut lrng)
            .into_iter()
            .map(|i| data.labeled[i].clone())
            .collect();
        let unl: Vec<UnlabeledSample> = if cfg.mode == Mode::Supervised {
            Vec::new()
        } else {
            unlabeled_indices(cfg.seed, data.unlabeled.len(), cfg.batch_unlabeled, spe, step0)
                .into_iter()
                .map(|i| data.unlabeled[i].clone())
                .collect()
        };

        let outcome = train_step(&mut pair, &mut sgd, &lab, &unl, cfg, crop, step0)?;
        for (s, r) in unl.iter().zip(&outcome.reports) {
            hard_csv.line(&hardness::csv_row(step, &s.id, r))?;
        }
        let has_gamma = !outcome.reports.is_empty();
        let end_of_epoch = step % spe == 0;
        let eval_now = end_of_epoch && (epoch % cfg.eval_every == 0 || step == total_steps);
        let val_miou = if eval_now { Some(evaluate(&pair, &data.val, &mut evals, step, epoch, cfg.eval_teacher, &mut summary)?) } else { None };
        metrics.line(
            &MetricsRow {
                step,
                epoch,
                l_x: Some(outcome.breakdown.l_x),
                l_u: Some(outcome.breakdown.l_u),
                mean_gamma: has_gamma.then(|| mean_gamma(&outcome.reports)),
                std_gamma: has_gamma.then(|| std_gamma(&outcome.reports)),
                lr: Some(outcome.lr),
                val_miou,
            }
            .to_csv(),
        )?;
        if let Some(m) = val_miou {
            track_best(&paths.best, &pair, &sgd, m, step, &mut summary)?;
            metrics.flush()?;
            hard_csv.flush()?;
            evals.flush()?;
        }
        summary.steps = step;
    }

    metrics.flush()?;
    hard_csv.flush()?;
    evals.flush()?;
    save_checkpoint(&paths.last, &pair, &sgd.state)?;
    if summary.final_student.is_none() {
        // resumed runs that stop before an evaluation still report the final state
        let epoch = (summary.steps / spe) as usize;
        evaluate(&pair, &data.val, &mut evals, summary.steps, epoch, cfg.eval_teacher, &mut summary)?;
        evals.flush()?;
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary always serialises");
    fs::write(&paths.summary, text + "\n").map_err(|e| Error::io(&paths.summary, e))?;
    Ok(summary)
}
