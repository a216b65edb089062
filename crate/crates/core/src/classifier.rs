//! Source-class classifier, head replacement and few-shot fine-tuning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use fsaug_autograd::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{self, NamedTensor};
use crate::dataset::{augment_image, AugmentationSpec, LabeledImages};
use crate::error::{ensure, Error, Result};
use crate::objectives::mixup_batch;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{substream, Stream};
use crate::store::{Bound, Group, ParamStore};

const EVAL_CHUNK: usize = 256;

/// Residual convolutional network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub image_channels: usize,
    pub image_side: usize,
    pub width: usize,
    pub n_blocks: usize,
}

impl ClassifierArch {
    pub fn desk(image_side: usize) -> Self {
        ClassifierArch { image_channels: 1, image_side, width: 32, n_blocks: 4 }
    }

    pub fn tiny(image_side: usize) -> Self {
        ClassifierArch { image_channels: 1, image_side, width: 8, n_blocks: 4 }
    }

    pub fn feature_dim(&self) -> usize {
        self.width
    }

    /// Blocks followed by 2x2 pooling: all but the last, while the side stays even and at least 4.
    fn pooled_blocks(&self) -> Vec<bool> {
        let mut side = self.image_side;
        (0..self.n_blocks)
            .map(|b| {
                let pool = b + 1 < self.n_blocks && side % 2 == 0 && side >= 4;
                if pool {
                    side /= 2;
                }
                pool
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.width > 0 && self.n_blocks > 0 && self.image_side > 0 && self.image_channels > 0, Argument, "classifier dimensions must be positive");
        Ok(())
    }
}

/// A classifier whose head row `i` scores dataset class `classes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub params: ParamStore<f32>,
    pub classes: Vec<usize>,
}

fn block(b: usize, part: &str) -> String {
    format!("c.block{b}.{part}")
}

impl Classifier {
    pub fn new(arch: ClassifierArch, classes: &[usize], seed: u64) -> Result<Self> {
        arch.validate()?;
        let w = arch.width;
        let conv_std = (2.0 / (9.0 * w as f64)).sqrt();
        let mut p = ParamStore::new();
        p.insert_normal("c.stem.w", Group::Backbone, &[w, arch.image_channels, 3, 3], (2.0 / (9.0 * arch.image_channels as f64)).sqrt(), seed);
        p.insert_zeros("c.stem.b", Group::Backbone, &[w]);
        for b in 0..arch.n_blocks {
            p.insert_normal(&block(b, "conv1.w"), Group::Backbone, &[w, w, 3, 3], conv_std, seed);
            p.insert_zeros(&block(b, "conv1.b"), Group::Backbone, &[w]);
            p.insert_normal(&block(b, "conv2.w"), Group::Backbone, &[w, w, 3, 3], 0.5 * conv_std, seed);
            p.insert_zeros(&block(b, "conv2.b"), Group::Backbone, &[w]);
        }
        let mut c = Classifier { arch, params: p, classes: Vec::new() };
        c.replace_head(classes, seed)?;
        Ok(c)
    }

    /// Swaps in a fresh `N(0, 0.01^2)` head for `classes`; the backbone is untouched.
    pub fn replace_head(&mut self, classes: &[usize], seed: u64) -> Result<()> {
        ensure!(classes.len() >= 2, Argument, "a head needs at least 2 classes, got {}", classes.len());
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(sorted.len() == classes.len(), Argument, "head classes must be distinct");
        let mut fresh = ParamStore::new();
        fresh.insert_normal("c.head.w", Group::Head, &[self.arch.width, classes.len()], 0.01, seed);
        fresh.insert_zeros("c.head.b", Group::Head, &[classes.len()]);
        let mut params = ParamStore::new();
        for p in self.params.iter().filter(|p| p.group != Group::Head).chain(fresh.iter()) {
            params.insert(p.name.clone(), p.group, p.value.as_ref().clone());
        }
        self.params = params;
        self.classes = classes.to_vec();
        Ok(())
    }

    pub fn head_index(&self, label: usize) -> Result<usize> {
        self.classes.iter().position(|&c| c == label).ok_or_else(|| Error::Index(format!("label {label} is not covered by the classifier head")))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        let expect = [a.image_channels, a.image_side, a.image_side];
        ensure!(shape.len() == 4 && shape[1..] == expect, Argument, "classifier input must be [B, {expect:?}], got {shape:?}");
        Ok(())
    }

    /// Penultimate features of `[0, 1]` images.
    pub fn backbone<'g>(&self, bound: &Bound<'g, '_, f32>, x: Var<'g, f32>) -> Var<'g, f32> {
        let mut h = x.scale(2.0).add_scalar(-1.0).conv2d(bound.var("c.stem.w")).add_channel_bias(bound.var("c.stem.b"));
        for (b, pool) in self.arch.pooled_blocks().into_iter().enumerate() {
            let r = h
                .relu()
                .conv2d(bound.var(&block(b, "conv1.w")))
                .add_channel_bias(bound.var(&block(b, "conv1.b")))
                .relu()
                .conv2d(bound.var(&block(b, "conv2.w")))
                .add_channel_bias(bound.var(&block(b, "conv2.b")));
            h = h + r;
            if pool {
                h = h.avg_pool2x();
            }
        }
        h.relu().mean_spatial()
    }

    pub fn head<'g>(&self, bound: &Bound<'g, '_, f32>, features: Var<'g, f32>) -> Var<'g, f32> {
        features.matmul(bound.var("c.head.w")).add_bias(bound.var("c.head.b"))
    }

    /// `[N, feature_dim]` penultimate activations; rows depend only on their own image.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(images.shape())?;
        let n = images.dim(0);
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = images.slice_outer(start, (start + EVAL_CHUNK).min(n));
            let g = Graph::new();
            let bound = self.params.bind_constant(&g);
            parts.push(self.backbone(&bound, g.constant(chunk)).value().as_ref().clone());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.arch.feature_dim()]));
        }
        Ok(Tensor::concat_outer(&parts.iter().collect::<Vec<_>>()))
    }

    fn head_logits(&self, features: &Tensor<f32>) -> Tensor<f32> {
        let g = Graph::new();
        let bound = self.params.bind_constant(&g);
        self.head(&bound, g.constant(features.clone())).value().as_ref().clone()
    }

    /// Predicted dataset class per image.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.head_logits(&self.features(images)?);
        Ok(argmax_rows(&logits).into_iter().map(|i| self.classes[i]).collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "kind": "classifier", "arch": self.arch, "classes": self.classes });
        container::save(dir, &self.params.to_named(""), meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (tensors, meta) = container::load::<f32>(dir)?;
        let arch = serde_json::from_value(meta["arch"].clone())?;
        let classes = serde_json::from_value(meta["classes"].clone())?;
        Ok(Classifier { arch, params: ParamStore::from_named(&tensors, "")?, classes })
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<f32>> {
        self.params.to_named("")
    }
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let n = logits.dim(1);
    logits
        .data()
        .chunks(n)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

fn accuracy_from_features(c: &Classifier, features: &Tensor<f32>, targets: &[usize]) -> f64 {
    let pred = argmax_rows(&c.head_logits(features));
    pred.iter().zip(targets).filter(|(p, t)| p == t).count() as f64 / targets.len() as f64
}

fn head_targets(c: &Classifier, set: &LabeledImages) -> Result<Vec<usize>> {
    set.labels.iter().map(|&l| c.head_index(l)).collect()
}

/// Fraction of argmax-correct predictions.
pub fn evaluate_accuracy(classifier: &Classifier, set: &LabeledImages) -> Result<f64> {
    ensure!(!set.is_empty(), Argument, "cannot evaluate on an empty set");
    let targets = head_targets(classifier, set)?;
    let all: Vec<usize> = (0..set.len()).collect();
    let features = classifier.features(&set.batch(&all))?;
    Ok(accuracy_from_features(classifier, &features, &targets))
}

fn one_hot(targets: &[usize], n: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[targets.len(), n]);
    for (i, &c) in targets.iter().enumerate() {
        t.data_mut()[i * n + c] = 1.0;
    }
    t
}

fn augmented_batch(set: &LabeledImages, idx: &[usize], spec: &AugmentationSpec, rng: &mut Stream) -> Tensor<f32> {
    let mut batch = set.batch(idx);
    if !spec.is_identity() {
        let n = set.shape.numel();
        for (i, chunk) in batch.data_mut().chunks_mut(n).enumerate() {
            let out = augment_image(set.image(idx[i]), set.shape, spec, rng);
            chunk.copy_from_slice(&out);
        }
    }
    batch
}

fn draw_batch(n: usize, batch: usize, rng: &mut Stream) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    let (chosen, _) = all.partial_shuffle(rng, batch.min(n));
    chosen.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub holdout_fraction: f64,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            batch_size: 64,
            max_steps: 5000,
            eval_every: 100,
            holdout_fraction: 0.05,
            augmentation: AugmentationSpec::PRETRAIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub classifier: Classifier,
    pub heldout_accuracy: f64,
    pub best_step: usize,
}

/// Trains on source classes with crop/rotation augmentation and keeps the
/// parameters with the best accuracy on a stratified internal hold-out.
pub fn pretrain_classifier(train: &LabeledImages, arch: ClassifierArch, config: &PretrainConfig) -> Result<PretrainOutcome> {
    let classes = train.classes();
    ensure!(classes.len() >= 2, Argument, "classifier pre-training needs at least 2 classes, got {}", classes.len());
    ensure!(config.batch_size > 0 && config.eval_every > 0, Config, "batch size and evaluation cadence must be positive");
    ensure!(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0, Config, "hold-out fraction must lie in (0, 1)");
    config.augmentation.validate()?;
    let adam = AdamConfig::new(config.learning_rate, config.adam_betas);
    adam.validate()?;

    let mut split_rng = substream(config.seed, "holdout");
    let (mut fit_idx, mut hold_idx) = (Vec::new(), Vec::new());
    for &c in &classes {
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
        idx.shuffle(&mut split_rng);
        let n_hold = if idx.len() < 2 { 0 } else { ((idx.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, idx.len() - 1) };
        hold_idx.extend_from_slice(&idx[..n_hold]);
        fit_idx.extend_from_slice(&idx[n_hold..]);
    }
    let fit = train.select(&fit_idx);
    let hold = train.select(&hold_idx);

    let mut clf = Classifier::new(arch, &classes, config.seed)?;
    let fit_targets = head_targets(&clf, &fit)?;
    let hold_targets = head_targets(&clf, &hold)?;
    let hold_batch = hold.batch(&(0..hold.len()).collect::<Vec<_>>());
    let hold_acc = |c: &Classifier| -> Result<f64> {
        if hold.is_empty() {
            return Ok(0.0);
        }
        Ok(accuracy_from_features(c, &c.features(&hold_batch)?, &hold_targets))
    };

    let mut opt = Adam::new(adam);
    let mut batch_rng = substream(config.seed, "batches");
    let mut aug_rng = substream(config.seed, "augment");
    let mut best = (hold_acc(&clf)?, 0usize, clf.params.clone());
    for step in 1..=config.max_steps {
        let idx = draw_batch(fit.len(), config.batch_size, &mut batch_rng);
        let x = augmented_batch(&fit, &idx, &config.augmentation, &mut aug_rng);
        let target = one_hot(&idx.iter().map(|&i| fit_targets[i]).collect::<Vec<_>>(), clf.classes.len());
        let g = Graph::new();
        let bound = clf.params.bind(&g, |_| true);
        let loss = clf.head(&bound, clf.backbone(&bound, g.constant(x))).softmax_cross_entropy(&target);
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Divergence { step, diagnostics: format!("classifier loss {lv}") });
        }
        let grads = bound.gradients(&g.backward(loss));
        drop(bound);
        opt.update(&mut clf.params, grads);
        if step % config.eval_every == 0 || step == config.max_steps {
            let acc = hold_acc(&clf)?;
            log::debug!("classifier step {step}: loss {lv:.4} hold-out accuracy {acc:.4}");
            if acc > best.0 {
                best = (acc, step, clf.params.clone());
            }
        }
    }
    clf.params = best.2;
    Ok(PretrainOutcome { classifier: clf, heldout_accuracy: best.0, best_step: best.1 })
}

/// Few-shot fine-tuning regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegimeKind {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "baseline+aug")]
    BaselineAug,
    #[serde(rename = "mixup")]
    Mixup,
    #[serde(rename = "gan")]
    Gan,
    #[serde(rename = "gan+semi")]
    GanSemi,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [RegimeKind::Baseline, RegimeKind::BaselineAug, RegimeKind::Mixup, RegimeKind::Gan, RegimeKind::GanSemi];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::Baseline => "baseline",
            RegimeKind::BaselineAug => "baseline+aug",
            RegimeKind::Mixup => "mixup",
            RegimeKind::Gan => "gan",
            RegimeKind::GanSemi => "gan+semi",
        }
    }

    pub fn uses_gan(self) -> bool {
        matches!(self, RegimeKind::Gan | RegimeKind::GanSemi)
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RegimeKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::Argument(format!("unknown regime {s:?}")))
    }
}

/// A regime with its hyperparameters; fields unused by `kind` are carried along.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRegime {
    pub kind: RegimeKind,
    pub min_scale: f64,
    pub mixup_beta: f64,
    pub n_s: usize,
    pub sigma: f64,
}

impl FinetuneRegime {
    pub fn new(kind: RegimeKind) -> Self {
        FinetuneRegime { kind, min_scale: 0.8, mixup_beta: 0.2, n_s: 0, sigma: 1.0 }
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        match self.kind {
            RegimeKind::Baseline => AugmentationSpec::crop_only(1.0),
            _ => AugmentationSpec::crop_only(self.min_scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { learning_rate: 2e-5, adam_betas: (0.9, 0.999), batch_size: 64, max_steps: 30_000, eval_every: 50, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub classifier: Classifier,
    pub best_valid_accuracy: f64,
    pub best_step: usize,
    /// `(step, model-selection accuracy)` at every evaluation.
    pub history: Vec<(usize, f64)>,
}

/// Trains only the head on `train_set` under `regime`, evaluating on
/// `selection` at step 0 and every `eval_every` steps; returns the best head.
pub fn finetune_classifier(
    classifier: &Classifier,
    train_set: &LabeledImages,
    regime: &FinetuneRegime,
    selection: &LabeledImages,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    ensure!(!train_set.is_empty(), Argument, "fine-tuning set is empty");
    ensure!(!selection.is_empty(), Argument, "model-selection set is empty");
    ensure!(config.batch_size > 0 && config.eval_every > 0, Config, "batch size and evaluation cadence must be positive");
    let spec = regime.augmentation();
    spec.validate()?;
    let mixup = regime.kind == RegimeKind::Mixup;
    if mixup {
        ensure!(regime.mixup_beta > 0.0, Argument, "mixup beta must be positive");
    }
    let adam = AdamConfig::new(config.learning_rate, config.adam_betas);
    adam.validate()?;

    let mut clf = classifier.clone();
    let n_classes = clf.classes.len();
    let targets = head_targets(&clf, train_set)?;
    let sel_targets = head_targets(&clf, selection)?;
    let sel_features = clf.features(&selection.batch(&(0..selection.len()).collect::<Vec<_>>()))?;
    let cached = if spec.is_identity() && !mixup { Some(clf.features(&train_set.batch(&(0..train_set.len()).collect::<Vec<_>>()))?) } else { None };

    let mut opt = Adam::new(adam);
    let mut batch_rng = substream(config.seed, "ft-batches");
    let mut aug_rng = substream(config.seed, "ft-augment");
    let mut mix_rng = substream(config.seed, "ft-mixup");
    let acc0 = accuracy_from_features(&clf, &sel_features, &sel_targets);
    let mut history = vec![(0, acc0)];
    let mut best = (acc0, 0usize, clf.params.clone());
    let batch_size = config.batch_size.min(train_set.len());
    for step in 1..=config.max_steps {
        let idx = draw_batch(train_set.len(), batch_size, &mut batch_rng);
        let mut target = one_hot(&idx.iter().map(|&i| targets[i]).collect::<Vec<_>>(), n_classes);
        let g = Graph::new();
        let bound = clf.params.bind(&g, |p| p.group == Group::Head);
        let features = match &cached {
            Some(f) => g.constant(f.select_outer(&idx)),
            None => {
                let mut x = augmented_batch(train_set, &idx, &spec, &mut aug_rng);
                if mixup && idx.len() >= 2 {
                    let m = mixup_batch(&x, &target, regime.mixup_beta, &mut mix_rng)?;
                    x = m.x;
                    target = m.y;
                }
                let fb = clf.backbone(&bound, g.constant(x)).value();
                g.constant_shared(fb)
            }
        };
        let loss = clf.head(&bound, features).softmax_cross_entropy(&target);
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Divergence { step, diagnostics: format!("fine-tuning loss {lv}") });
        }
        let grads = bound.gradients(&g.backward(loss));
        drop(bound);
        opt.update(&mut clf.params, grads);
        if step % config.eval_every == 0 || step == config.max_steps {
            let acc = accuracy_from_features(&clf, &sel_features, &sel_targets);
            history.push((step, acc));
            if acc > best.0 {
                best = (acc, step, clf.params.clone());
            }
        }
    }
    clf.params = best.2;
    Ok(FinetuneOutcome { classifier: clf, best_valid_accuracy: best.0, best_step: best.1, history })
}
