//! Command-line front end. Exit codes: 0 ok, 2 bad arguments, 3 I/O or
//! decode failure, 4 numeric abort during training.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::augment::{BlendDirection, CutmixTrigger};
use crate::data::{generate_dataset, Dataset, Fraction, GenerateSpec, PartitionManifest};
use crate::error::{Error, Result};
use crate::hardness::{self, evaluate_hardness};
use crate::loss::PseudoLabel;
use crate::model::load_checkpoint;
use crate::trainer::{self, evaluate_miou, read_metrics, Mode, RunPaths, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ARGS: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "imas", version, about = "Hardness-adaptive semi-supervised segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Partition the training pool into labelled and unlabelled ids.
    Split(SplitArgs),
    /// Train a student/teacher pair.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation set.
    Eval(EvalArgs),
    /// Recompute per-instance hardness with a checkpoint.
    InspectHardness(InspectArgs),
    /// Reshape a run's metrics into plot-ready CSVs.
    ExportPlotsData(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub n_train: usize,
    #[arg(long, default_value_t = 64)]
    pub n_val: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Labelled share such as 1/16, or an explicit count.
    #[arg(long, default_value = "1/16")]
    pub fraction: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "imas", value_parser = ["supervised", "standard_cr", "imas"])]
    pub mode: String,
    /// Re-split the training pool (e.g. 1/16) instead of using the manifest's labelled ids.
    #[arg(long)]
    pub fraction: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    pub tau: f64,
    #[arg(long, default_value_t = 3.0)]
    pub lambda_u: f64,
    #[arg(long, default_value_t = 0.996)]
    pub alpha: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Labelled and unlabelled batch size.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value = "prose", value_parser = ["prose", "literal"])]
    pub blend_direction: String,
    #[arg(long, default_value = "prose", value_parser = ["prose", "probability_mean"])]
    pub cutmix_trigger: String,
    #[arg(long, default_value = "hard", value_parser = ["hard", "soft"])]
    pub pseudo_label: String,
    #[arg(long, default_value_t = 5)]
    pub eval_every: usize,
    /// Report the teacher's mIoU as val_miou.
    #[arg(long)]
    pub eval_teacher: bool,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this global step.
    #[arg(long)]
    pub halt_after: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated instance ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub tau: f64,
    /// Where to write the CSV table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn print_config<T: Serialize>(command: &str, args: &T) {
    let json = serde_json::to_string_pretty(args).expect("arguments always serialise");
    println!("{command} config:\n{json}");
}

fn enum_of<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| Error::arg(e.to_string()))
}

impl TrainArgs {
    pub fn to_config(&self) -> Result<TrainConfig> {
        let blend: BlendDirection = enum_of(&self.blend_direction)?;
        let trigger: CutmixTrigger = enum_of(&self.cutmix_trigger)?;
        let pseudo: PseudoLabel = enum_of(&self.pseudo_label)?;
        let cfg = TrainConfig {
            mode: self.mode.parse::<Mode>()?,
            tau: self.tau,
            lambda_u: self.lambda_u,
            alpha: self.alpha,
            batch_labeled: self.batch,
            batch_unlabeled: self.batch,
            epochs: self.epochs,
            base_lr: self.lr,
            seed: self.seed,
            blend_direction: blend,
            cutmix_trigger: trigger,
            pseudo_label: pseudo,
            eval_every: self.eval_every,
            eval_teacher: self.eval_teacher,
            resume: self.resume.clone(),
            halt_after: self.halt_after,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let m = generate_dataset(&a.out, &GenerateSpec::new(a.n_train, a.n_val, a.size, a.classes, a.seed))?;
    println!(
        "wrote {} train and {} val scenes to {} (seed {})",
        m.unlabeled.len(),
        m.val.len(),
        a.out.display(),
        m.seed
    );
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let m = PartitionManifest::load(&a.data)?;
    let m = m.split(a.fraction.parse::<Fraction>()?, a.seed)?;
    m.save(&a.data)?;
    println!("{} labelled, {} unlabelled, {} val", m.labeled.len(), m.unlabeled.len(), m.val.len());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.to_config()?;
    println!("train config:\n{}", cfg.to_json());
    let mut manifest = PartitionManifest::load(&a.data)?;
    if let Some(f) = &a.fraction {
        manifest = manifest.split(f.parse::<Fraction>()?, cfg.seed)?;
    }
    if manifest.labeled.is_empty() {
        return Err(Error::arg("no labelled ids: pass --fraction or run `split` first"));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    // record the partition actually used, without moving the dataset root
    let record = a.out.join("partition.json");
    fs::write(&record, serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n")
        .map_err(|e| Error::io(&record, e))?;
    let data = Dataset::load(&manifest)?;
    let summary = trainer::run(&cfg, &data, &a.out)?;
    println!(
        "done: {} steps, final student mIoU {:.4}, teacher mIoU {:.4}, best {:.4} at step {}",
        summary.steps,
        summary.final_miou(false).unwrap_or(f64::NAN),
        summary.final_miou(true).unwrap_or(f64::NAN),
        summary.best_miou.unwrap_or(f64::NAN),
        summary.best_step.unwrap_or(0)
    );
    Ok(())
}

fn class_table(per_class: &[Option<f64>]) -> String {
    per_class
        .iter()
        .enumerate()
        .map(|(c, v)| match v {
            Some(v) => format!("{c}:{v:.4}"),
            None => format!("{c}:-"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (pair, _) = load_checkpoint(&a.checkpoint)?;
    let manifest = PartitionManifest::load(&a.data)?;
    if pair.student.num_classes() != manifest.k {
        return Err(Error::arg(format!(
            "checkpoint has {} classes, dataset {}",
            pair.student.num_classes(),
            manifest.k
        )));
    }
    let val = Dataset::load(&manifest)?.val;
    let s = evaluate_miou(&pair.student, &val)?;
    let t = evaluate_miou(&pair.teacher, &val)?;
    println!("student mIoU {:.4}  [{}]", s.miou, class_table(&s.per_class));
    println!("teacher mIoU {:.4}  [{}]", t.miou, class_table(&t.per_class));
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let (pair, _) = load_checkpoint(&a.checkpoint)?;
    let manifest = PartitionManifest::load(&a.data)?;
    let mut known: Vec<String> = manifest.train_ids();
    known.extend(manifest.val.iter().cloned());
    if let Some(bad) = a.ids.iter().find(|id| !known.contains(id)) {
        let mut msg = format!("unknown id {bad:?}; valid ids:");
        for id in &known {
            let _ = write!(msg, " {id}");
        }
        return Err(Error::arg(msg));
    }
    let mut table = String::from(hardness::CSV_HEADER);
    table.push('\n');
    for id in &a.ids {
        let image = crate::data::read_ppm(&manifest.image_path(id))?;
        let r = evaluate_hardness(&pair.teacher.predict(&image)?, &pair.student.predict(&image)?, a.tau)?;
        table.push_str(&hardness::csv_row(0, id, &r));
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = &a.csv {
        fs::write(path, &table).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn export(a: &ExportArgs) -> Result<()> {
    let rows = read_metrics(&RunPaths::new(&a.run).metrics)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    write_csv(
        &a.out.join("gamma.csv"),
        "step,mean_gamma,std_gamma",
        rows.iter()
            .filter(|r| r.mean_gamma.is_some())
            .map(|r| format!("{},{},{}", r.step, f(r.mean_gamma), f(r.std_gamma))),
    )?;
    write_csv(
        &a.out.join("loss.csv"),
        "step,l_x,l_u,lr",
        rows.iter()
            .filter(|r| r.l_x.is_some())
            .map(|r| format!("{},{},{},{}", r.step, f(r.l_x), f(r.l_u), f(r.lr))),
    )?;
    write_csv(
        &a.out.join("miou.csv"),
        "step,epoch,val_miou",
        rows.iter()
            .filter(|r| r.val_miou.is_some())
            .map(|r| format!("{},{},{}", r.step, r.epoch, f(r.val_miou))),
    )?;
    println!("wrote gamma.csv, loss.csv and miou.csv to {}", a.out.display());
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Decode { .. } => EXIT_IO,
        Error::NumericAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Dimension(_) | Error::Argument(_) | Error::Config(_) => EXIT_ARGS,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => {
            print_config("gen-data", a);
            gen_data(a)
        }
        Command::Split(a) => {
            print_config("split", a);
            split(a)
        }
        Command::Train(a) => train(a),
        Command::Eval(a) => {
            print_config("eval", a);
            eval(a)
        }
        Command::InspectHardness(a) => {
            print_config("inspect-hardness", a);
            inspect(a)
        }
        Command::ExportPlotsData(a) => {
            print_config("export-plots-data", a);
            export(a)
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ARGS } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
