use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::classifier::{ClassifierArch, FinetuneConfig, PretrainConfig, RegimeKind};
use crate::dataset::{load_idx_dataset, load_image_directory, make_synthetic, Dataset};
use crate::error::{ensure, Error, Result};
use crate::gan::{DFinetuneMode, GFinetuneMode, GanArch};
use crate::training::GanTrainConfig;

/// Environment variable that overrides `output_dir`.
pub const ARTIFACT_ROOT_ENV: &str = "FSAUG_ARTIFACT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic { n_classes: usize, per_class: usize, image_side: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf, #[serde(default)] per_class_cap: Option<usize> },
    ImageDir { root: PathBuf, #[serde(default)] resize: Option<usize>, #[serde(default)] per_class_cap: Option<usize> },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let (ds, cap) = match self {
            DatasetSpec::Synthetic { n_classes, per_class, image_side, seed } => (make_synthetic(*n_classes, *per_class, *image_side, *seed)?, None),
            DatasetSpec::Idx { images, labels, per_class_cap } => (load_idx_dataset(images, labels)?, *per_class_cap),
            DatasetSpec::ImageDir { root, resize, per_class_cap } => (load_image_directory(root, *resize)?, *per_class_cap),
        };
        Ok(match cap {
            Some(c) => ds.cap_per_class(c),
            None => ds,
        })
    }
}

/// Hyperparameter values swept per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrids {
    pub n_s: Vec<usize>,
    pub min_scale: Vec<f64>,
    pub mixup_beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub dfm: Vec<DFinetuneMode>,
    pub gfm: Vec<GFinetuneMode>,
    pub p_ada: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Default for SweepGrids {
    fn default() -> Self {
        SweepGrids {
            n_s: vec![2, 5, 10, 20],
            min_scale: vec![0.2, 0.4, 0.6, 0.8],
            mixup_beta: vec![0.1, 0.2, 0.5, 1.0],
            alpha: vec![0.0, 0.1, 1.0, 5.0, 50.0, 100.0],
            dfm: vec![DFinetuneMode::All],
            gfm: vec![GFinetuneMode::Embed],
            p_ada: vec![0.0, 0.5],
            sigma: vec![1.0, 1.5],
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(k) => vec![k],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub n_train_classes: usize,
    pub n_target_classes: usize,
    pub valid_fraction: f64,
    pub dataset_seeds: Vec<u64>,
    /// Shots per target class; a single number or a list.
    #[serde(deserialize_with = "one_or_many")]
    pub k: Vec<usize>,
    pub support_seed: u64,
    pub regimes: Vec<RegimeKind>,
    pub classifier_arch: ClassifierArch,
    pub classifier_pretrain: PretrainConfig,
    pub classifier_finetune: FinetuneConfig,
    /// `class_budget` is replaced by the dataset's class count.
    pub gan_arch: GanArch,
    pub gan_pretrain: GanTrainConfig,
    pub gan_finetune: GanTrainConfig,
    pub grids: SweepGrids,
    /// Crop scale used by the mixup and GAN regimes.
    pub fixed_min_scale: f64,
    pub knn_k: usize,
    /// Images per class in each fake validation set.
    pub fake_valid_per_class: usize,
    pub output_dir: PathBuf,
}

/// Training settings that converge for the 16px default architecture.
fn desk_gan() -> GanTrainConfig {
    GanTrainConfig { learning_rate: 1e-3, gamma: 1.0, d_steps_per_g_step: 2, batch_size: 32, ..Default::default() }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::Synthetic { n_classes: 14, per_class: 100, image_side: 16, seed: 0 },
            n_train_classes: 10,
            n_target_classes: 4,
            valid_fraction: 0.8,
            dataset_seeds: vec![0],
            k: vec![5],
            support_seed: 0,
            regimes: RegimeKind::ALL.to_vec(),
            classifier_arch: ClassifierArch::tiny(16),
            classifier_pretrain: PretrainConfig { learning_rate: 1e-3, batch_size: 32, max_steps: 400, ..Default::default() },
            classifier_finetune: FinetuneConfig { learning_rate: 1e-2, batch_size: 32, max_steps: 300, ..Default::default() },
            gan_arch: GanArch { image_side: 16, n_blocks: 3, latent_dim: 8, embed_dim: 8, g_width: 8, d_width: 8, feature_dim: 8, ..GanArch::tiny(14) },
            gan_pretrain: GanTrainConfig { max_steps: 1000, fid_every: 100, fid_sample_count: 400, ..desk_gan() },
            gan_finetune: GanTrainConfig { batch_size: 16, max_steps: 150, fid_every: 25, fid_sample_count: 320, ..desk_gan() },
            grids: SweepGrids::default(),
            fixed_min_scale: 0.8,
            knn_k: 3,
            fake_valid_per_class: 100,
            output_dir: PathBuf::from("artifacts"),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; `key` is a dotted path into the JSON form
    /// and `value` is parsed as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut json = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut json, key, value)?;
        }
        serde_json::from_value(json).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    /// `$FSAUG_ARTIFACT_ROOT` if set, otherwise `output_dir`.
    pub fn artifact_root(&self) -> PathBuf {
        std::env::var_os(ARTIFACT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.dataset_seeds.is_empty(), Config, "dataset_seeds is empty");
        ensure!(!self.k.is_empty() && self.k.iter().all(|&k| k >= 1), Config, "k values must be at least 1");
        ensure!(self.knn_k >= 1, Config, "knn_k must be at least 1");
        ensure!(self.fake_valid_per_class >= 1, Config, "fake_valid_per_class must be at least 1");
        let g = &self.grids;
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::Config(format!("grid {what} is empty but a regime sweeps it"))) };
        for r in &self.regimes {
            match r {
                RegimeKind::Baseline => {}
                RegimeKind::BaselineAug => need(!g.min_scale.is_empty(), "min_scale")?,
                RegimeKind::Mixup => need(!g.mixup_beta.is_empty(), "mixup_beta")?,
                RegimeKind::Gan | RegimeKind::GanSemi => {
                    need(!g.n_s.is_empty(), "n_s")?;
                    need(!g.sigma.is_empty(), "sigma")?;
                    need(!g.dfm.is_empty() && !g.gfm.is_empty(), "dfm/gfm")?;
                    need(!g.p_ada.is_empty(), "p_ada")?;
                    if *r == RegimeKind::Gan {
                        need(g.alpha.contains(&0.0), "alpha (needs 0 for the supervised GAN)")?;
                    } else {
                        need(g.alpha.iter().any(|&a| a > 0.0), "alpha (needs a positive value)")?;
                    }
                }
            }
        }
        self.gan_pretrain.validate()?;
        self.gan_finetune.validate()?;
        Ok(())
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    return Err(Error::Config(format!("unknown configuration key {key:?}")));
                }
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part).expect("checked")
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| Error::Config(format!("{key:?}: {part:?} is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| Error::Config(format!("{key:?}: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{key:?}: cannot descend into a scalar"))),
        };
    }
    Ok(())
}
