#![allow(dead_code)]

use std::path::Path;

use imas::data::{generate_dataset, Dataset, Fraction, GenerateSpec, PartitionManifest};
use imas::trainer::TrainConfig;

/// Renders a dataset under `root` and splits `labeled` ids out of it.
pub fn small_dataset(root: &Path, n_train: usize, n_val: usize, size: usize, k: usize, labeled: usize) -> Dataset {
    let m = generate_dataset(root, &GenerateSpec::new(n_train, n_val, size, k, 7)).unwrap();
    let m = m.split(Fraction::Count(labeled), 0).unwrap();
    m.save(root).unwrap();
    Dataset::load(&PartitionManifest::load(root).unwrap()).unwrap()
}

/// A configuration small enough for a debug-speed test.
pub fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_labeled: 2,
        batch_unlabeled: 2,
        epochs: 1,
        widths: [4, 8, 8],
        eval_every: 1,
        ..TrainConfig::default()
    }
}
