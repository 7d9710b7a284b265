//! Synthetic shapes dataset: generation, on-disk layout, partitions and loading.
//!
//! Layout under a root directory:
//! `images/{id}.ppm`, `labels/{id}.pgm`, `manifest.json`.

mod pnm;
mod scene;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ImageTensor, LabelMap};
use crate::rng::{substream, Stream};

pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, quantize, read_pgm, read_ppm, write_pgm, write_ppm};
pub use scene::{class_shape, render_scene, SceneStyle, ShapeKind, ShapesScene};

pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_COVERAGE_RETRIES: u64 = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub k: usize,
    pub crop: usize,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
}

impl PartitionManifest {
    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.pgm"))
    }

    /// All training ids (labelled and unlabelled), sorted.
    pub fn train_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.labeled.iter().chain(&self.unlabeled).cloned().collect();
        ids.sort();
        ids
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: PartitionManifest =
            serde_json::from_str(&text).map_err(|e| Error::decode(&path, e.to_string()))?;
        m.root = root.to_path_buf();
        m.validate().map_err(|e| Error::decode(&path, e.to_string()))?;
        Ok(m)
    }

    /// Writes `manifest.json` into `dir` (the images stay under `self.root`).
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest always serialises");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.k) {
            return Err(Error::Config(format!("k must be in [2,8], got {}", self.k)));
        }
        let l: BTreeSet<&String> = self.labeled.iter().collect();
        let u: BTreeSet<&String> = self.unlabeled.iter().collect();
        let v: BTreeSet<&String> = self.val.iter().collect();
        if l.len() != self.labeled.len() || u.len() != self.unlabeled.len() || v.len() != self.val.len() {
            return Err(Error::Config("duplicate ids in manifest".into()));
        }
        if !l.is_disjoint(&u) || !l.is_disjoint(&v) || !u.is_disjoint(&v) {
            return Err(Error::Config("labeled, unlabeled and val ids must be disjoint".into()));
        }
        Ok(())
    }

    /// Re-partitions the training pool into labelled and unlabelled ids.
    pub fn split(&self, fraction: Fraction, seed: u64) -> Result<PartitionManifest> {
        let (labeled, unlabeled) = split_ids(&self.train_ids(), fraction, seed)?;
        Ok(PartitionManifest {
            labeled,
            unlabeled,
            ..self.clone()
        })
    }
}

/// Labelled share of the training pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fraction {
    Ratio(u64, u64),
    Count(usize),
}

impl Fraction {
    pub fn labeled_count(self, n: usize) -> usize {
        match self {
            // round half up: ⌊(2·n·a + b) / 2b⌋
            Fraction::Ratio(a, b) => ((2 * n as u64 * a + b) / (2 * b)) as usize,
            Fraction::Count(c) => c,
        }
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fraction::Ratio(a, b) => write!(f, "{a}/{b}"),
            Fraction::Count(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::arg(format!("fraction must look like 1/8 or a count, got {s:?}"));
        match s.split_once('/') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if b == 0 || a > b {
                    return Err(bad());
                }
                Ok(Fraction::Ratio(a, b))
            }
            None => Ok(Fraction::Count(s.trim().parse().map_err(|_| bad())?)),
        }
    }
}

/// Uniformly random labelled subset of `ids`; both halves keep `ids`' order.
pub fn split_ids(ids: &[String], fraction: Fraction, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n_lab = fraction.labeled_count(ids.len());
    if n_lab == 0 {
        return Err(Error::arg(format!("fraction {fraction} of {} ids leaves no labelled data", ids.len())));
    }
    if n_lab > ids.len() {
        return Err(Error::arg(format!("cannot label {n_lab} of {} ids", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Split, 0, 0));
    let chosen: BTreeSet<usize> = order[..n_lab].iter().copied().collect();
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if chosen.contains(&i) {
            labeled.push(id.clone());
        } else {
            unlabeled.push(id.clone());
        }
    }
    Ok((labeled, unlabeled))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub style: SceneStyle,
}

impl GenerateSpec {
    pub fn new(n_train: usize, n_val: usize, size: usize, classes: usize, seed: u64) -> Self {
        Self {
            n_train,
            n_val,
            height: size,
            width: size,
            classes,
            seed,
            style: SceneStyle::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.classes) {
            return Err(Error::arg(format!("classes must be in [2,8], got {}", self.classes)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::arg(format!("scenes must be at least 16×16, got {}×{}", self.height, self.width)));
        }
        Ok(())
    }
}

pub fn train_id(i: usize) -> String {
    format!("train_{i:05}")
}

pub fn val_id(i: usize) -> String {
    format!("val_{i:05}")
}

/// Renders all scenes for one seed: training scenes first, then validation.
pub fn render_scenes(spec: &GenerateSpec, seed: u64) -> Vec<(String, ShapesScene)> {
    let ids = (0..spec.n_train).map(|i| (train_id(i), 0, i)).chain((0..spec.n_val).map(|i| (val_id(i), 1, i)));
    ids.map(|(id, part, i)| {
        let mut rng = substream(seed, Stream::Generation, part, i as u64);
        let s = render_scene(spec.height, spec.width, spec.classes, seed, &spec.style, &mut rng);
        (id, s)
    })
    .collect()
}

fn covers_all_classes(scenes: &[(String, ShapesScene)], n_train: usize, k: usize) -> bool {
    let mut seen = vec![false; k];
    for (_, s) in &scenes[..n_train.min(scenes.len())] {
        for &l in s.label.data() {
            seen[l as usize] = true;
        }
    }
    seen[1..].iter().all(|&b| b) || n_train == 0
}

/// Writes the dataset under `root`. Re-renders with the next seed (up to 32
/// times) until every foreground class appears in the training scenes; the
/// manifest records the seed actually used. All training ids start unlabelled.
pub fn generate_dataset(root: &Path, spec: &GenerateSpec) -> Result<PartitionManifest> {
    spec.validate()?;
    let mut seed = spec.seed;
    let mut scenes = render_scenes(spec, seed);
    while !covers_all_classes(&scenes, spec.n_train, spec.classes) && seed < spec.seed + MAX_COVERAGE_RETRIES {
        seed += 1;
        scenes = render_scenes(spec, seed);
    }
    for sub in ["images", "labels"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = PartitionManifest {
        root: root.to_path_buf(),
        k: spec.classes,
        crop: spec.height.min(spec.width),
        seed,
        labeled: Vec::new(),
        unlabeled: (0..spec.n_train).map(train_id).collect(),
        val: (0..spec.n_val).map(val_id).collect(),
    };
    for (id, s) in &scenes {
        write_ppm(&manifest.image_path(id), &s.image)?;
        write_pgm(&manifest.label_path(id), &s.label)?;
    }
    manifest.save(root)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: ImageTensor,
    pub label: LabelMap,
}

/// An unlabelled training instance. It has no label field, so ground truth
/// cannot reach the consistency path.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: ImageTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Labeled(LabeledSample),
    Unlabeled(UnlabeledSample),
}

impl Sample {
    pub fn id(&self) -> &str {
        match self {
            Sample::Labeled(s) => &s.id,
            Sample::Unlabeled(s) => &s.id,
        }
    }

    pub fn image(&self) -> &ImageTensor {
        match self {
            Sample::Labeled(s) => &s.image,
            Sample::Unlabeled(s) => &s.image,
        }
    }

    pub fn label(&self) -> Option<&LabelMap> {
        match self {
            Sample::Labeled(s) => Some(&s.label),
            Sample::Unlabeled(_) => None,
        }
    }
}

fn load_labeled(m: &PartitionManifest, id: &str) -> Result<LabeledSample> {
    let image = read_ppm(&m.image_path(id))?;
    let path = m.label_path(id);
    let label = read_pgm(&path)?;
    if (label.height(), label.width()) != (image.height(), image.width()) {
        return Err(Error::decode(path, "label size differs from image"));
    }
    if let Some(&bad) = label.data().iter().find(|&&l| l as usize >= m.k && l != crate::maps::IGNORE) {
        return Err(Error::decode(path, format!("label {bad} out of range for k={}", m.k)));
    }
    Ok(LabeledSample {
        id: id.to_string(),
        image,
        label,
    })
}

fn load_unlabeled(m: &PartitionManifest, id: &str) -> Result<UnlabeledSample> {
    Ok(UnlabeledSample {
        id: id.to_string(),
        image: read_ppm(&m.image_path(id))?,
    })
}

/// Samples `size` instances from `ids`: without replacement when the pool is
/// large enough, with replacement otherwise.
pub fn sample_indices(pool: usize, size: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool == 0 {
        return Vec::new();
    }
    let all: Vec<usize> = (0..pool).collect();
    if pool >= size {
        all.choose_multiple(rng, size).copied().collect()
    } else {
        (0..size).map(|_| rng.random_range(0..pool)).collect()
    }
}

/// Decodes a batch drawn from `ids`. Labels are read only for ids in the
/// manifest's labelled or validation sets.
pub fn load_batch(m: &PartitionManifest, ids: &[String], size: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    let known: BTreeSet<&String> = m.labeled.iter().chain(&m.unlabeled).chain(&m.val).collect();
    if let Some(id) = ids.iter().find(|id| !known.contains(id)) {
        return Err(Error::arg(format!("unknown id {id}")));
    }
    let with_labels: BTreeSet<&String> = m.labeled.iter().chain(&m.val).collect();
    sample_indices(ids.len(), size, rng)
        .into_iter()
        .map(|i| {
            let id = &ids[i];
            if with_labels.contains(id) {
                load_labeled(m, id).map(Sample::Labeled)
            } else {
                load_unlabeled(m, id).map(Sample::Unlabeled)
            }
        })
        .collect()
}

/// The whole partition decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: PartitionManifest,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub val: Vec<LabeledSample>,
}

impl Dataset {
    pub fn load(manifest: &PartitionManifest) -> Result<Self> {
        manifest.validate()?;
        let labeled = manifest.labeled.iter().map(|id| load_labeled(manifest, id)).collect::<Result<Vec<_>>>()?;
        let unlabeled = manifest.unlabeled.iter().map(|id| load_unlabeled(manifest, id)).collect::<Result<Vec<_>>>()?;
        let val = manifest.val.iter().map(|id| load_labeled(manifest, id)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: manifest.clone(),
            labeled,
            unlabeled,
            val,
        })
    }
}
