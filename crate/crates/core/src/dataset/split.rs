use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImages};
use crate::error::{ensure, Error, Result};
use crate::rng::substream;

/// Seed-determined split of classes into source and target sets, with a
/// per-target-class valid/test split of the example indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub dataset_seed: u64,
    pub train_classes: Vec<usize>,
    pub target_classes: Vec<usize>,
    pub valid_indices: BTreeMap<usize, Vec<usize>>,
    pub test_indices: BTreeMap<usize, Vec<usize>>,
}

impl ClassPartition {
    /// All example indices of the source classes, ascending.
    pub fn train_examples(&self, ds: &Dataset) -> Vec<usize> {
        let mut idx: Vec<usize> = self.train_classes.iter().flat_map(|&c| ds.class_indices(c).iter().copied()).collect();
        idx.sort_unstable();
        idx
    }

    pub fn valid_examples(&self) -> Vec<usize> {
        self.valid_indices.values().flatten().copied().collect()
    }

    pub fn test_examples(&self) -> Vec<usize> {
        self.test_indices.values().flatten().copied().collect()
    }

    pub fn train_set(&self, ds: &Dataset) -> LabeledImages {
        ds.gather(&self.train_examples(ds))
    }

    pub fn valid_set(&self, ds: &Dataset) -> LabeledImages {
        ds.gather(&self.valid_examples())
    }

    pub fn test_set(&self, ds: &Dataset) -> LabeledImages {
        ds.gather(&self.test_examples())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Samples disjoint source/target class sets and splits every target class's
/// examples `valid_fraction : 1 - valid_fraction`.
///
/// Both the class draw and the example shuffles are keyed only by
/// `dataset_seed`. Each target class keeps at least one example on either
/// side of the split when it has two or more examples.
pub fn split_classes(
    ds: &Dataset,
    dataset_seed: u64,
    n_train_classes: usize,
    n_target_classes: usize,
    valid_fraction: f64,
) -> Result<ClassPartition> {
    ensure!(
        n_train_classes + n_target_classes <= ds.class_count(),
        Argument,
        "{n_train_classes} source + {n_target_classes} target classes exceed the {} available",
        ds.class_count()
    );
    ensure!(valid_fraction > 0.0 && valid_fraction < 1.0, Argument, "valid_fraction must lie in (0, 1), got {valid_fraction}");
    let mut classes: Vec<usize> = (0..ds.class_count()).collect();
    classes.shuffle(&mut substream(dataset_seed, "class-split"));
    let mut train_classes = classes[..n_train_classes].to_vec();
    let mut target_classes = classes[n_train_classes..n_train_classes + n_target_classes].to_vec();
    train_classes.sort_unstable();
    target_classes.sort_unstable();

    let mut valid_indices = BTreeMap::new();
    let mut test_indices = BTreeMap::new();
    for &c in &target_classes {
        let mut idx = ds.class_indices(c).to_vec();
        idx.shuffle(&mut substream(dataset_seed, &format!("example-split/{c}")));
        let n = idx.len();
        let mut n_valid = (valid_fraction * n as f64).round() as usize;
        if n >= 2 {
            n_valid = n_valid.clamp(1, n - 1);
        }
        let test = idx.split_off(n_valid.min(n));
        valid_indices.insert(c, idx);
        test_indices.insert(c, test);
    }
    Ok(ClassPartition { dataset_seed, train_classes, target_classes, valid_indices, test_indices })
}

/// Exactly `k` labelled examples per target class, drawn from the valid split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pub k: usize,
    pub seed: u64,
    pub entries: BTreeMap<usize, Vec<usize>>,
}

impl SupportSet {
    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.values().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images ordered by class, then by draw order.
    pub fn images(&self, ds: &Dataset) -> LabeledImages {
        ds.gather(&self.indices())
    }
}

/// Draws `k` valid-split examples per target class without replacement.
pub fn sample_support(partition: &ClassPartition, ds: &Dataset, k: usize, seed: u64) -> Result<SupportSet> {
    ensure!(k >= 1, Argument, "k must be at least 1");
    let mut entries = BTreeMap::new();
    for (&c, valid) in &partition.valid_indices {
        ensure!(valid.iter().all(|&i| i < ds.len()), Index, "partition does not belong to dataset {}", ds.name());
        ensure!(k <= valid.len(), Argument, "k = {k} exceeds the {} validation examples of class {c}", valid.len());
        let mut pool = valid.clone();
        let (chosen, _) = pool.partial_shuffle(&mut substream(seed, &format!("support/{c}")), k);
        entries.insert(c, chosen.to_vec());
    }
    Ok(SupportSet { k, seed, entries })
}
