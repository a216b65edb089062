use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use crate::classifier::{evaluate_accuracy, finetune_classifier, pretrain_classifier, Classifier, FinetuneRegime, RegimeKind};
use crate::dataset::{sample_support, split_classes, ClassPartition, Dataset, LabeledImages};
use crate::error::{Error, Result};
use crate::gan::{DFinetuneMode, GFinetuneMode, TrainableMask};
use crate::metrics::{extract_features, fake_validation_accuracy, knn_precision_recall, sample_generator, PrecisionRecall};
use crate::rng::{derive_seed, substream};
use crate::training::{finetune_gan, generate_augmented_set, pretrain_gan, GanCheckpoint};

use super::config::RunConfig;
use super::records::{stage, ExperimentRecord, RecordFile};

/// One GAN fine-tuning configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GanCell {
    pub dfm: DFinetuneMode,
    pub gfm: GFinetuneMode,
    pub alpha: f64,
    pub p_ada: f64,
}

impl fmt::Display for GanCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dfm={},gfm={},alpha={},p_ada={}", self.dfm, self.gfm, self.alpha, self.p_ada)
    }
}

/// A finished GAN cell.
#[derive(Clone, Debug)]
pub struct GanCellResult {
    pub checkpoint: GanCheckpoint,
    pub fid: f64,
    pub pr: PrecisionRecall,
}

/// Artifact layout and load-or-compute stages for one configuration.
pub struct Workspace {
    pub config: RunConfig,
    pub root: PathBuf,
    pub dataset: Dataset,
}

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

pub fn gan_cell_id(seed: u64, k: usize, cell: &GanCell) -> String {
    format!("{}/k-{k}/gan/{cell}", seed_dir(seed))
}

pub fn classifier_cell_id(seed: u64, k: usize, regime: &FinetuneRegime, gan: Option<&str>) -> String {
    let base = format!("{}/k-{k}/clf/{}", seed_dir(seed), regime.kind);
    match regime.kind {
        RegimeKind::Baseline => base,
        RegimeKind::BaselineAug => format!("{base}/min_scale={}", regime.min_scale),
        RegimeKind::Mixup => format!("{base}/beta={},min_scale={}", regime.mixup_beta, regime.min_scale),
        RegimeKind::Gan | RegimeKind::GanSemi => {
            format!("{base}/n_s={},sigma={},min_scale={}/{}", regime.n_s, regime.sigma, regime.min_scale, gan.unwrap_or("none"))
        }
    }
}

pub fn test_cell_id(seed: u64, k: usize, regime: RegimeKind) -> String {
    format!("{}/k-{k}/test/{regime}", seed_dir(seed))
}

fn elapsed(t: Instant) -> Option<f64> {
    Some((t.elapsed().as_secs_f64() * 1000.0).round() / 1000.0)
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset.load()?;
        let root = config.artifact_root();
        Ok(Workspace { config, root, dataset })
    }

    pub fn records(&self) -> RecordFile {
        RecordFile::new(self.root.join("records.csv"))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn feature_extractor_tag(&self, seed: u64) -> String {
        format!("{}/classifier", seed_dir(seed))
    }

    pub fn partition(&self, seed: u64) -> Result<ClassPartition> {
        let path = self.path(&format!("{}/partition.json", seed_dir(seed)));
        if path.exists() {
            return ClassPartition::load(&path);
        }
        let c = &self.config;
        let p = split_classes(&self.dataset, seed, c.n_train_classes, c.n_target_classes, c.valid_fraction)?;
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(Error::io(&path))?;
        p.save(&path)?;
        Ok(p)
    }

    pub fn classifier(&self, seed: u64) -> Result<Classifier> {
        let dir = self.path(&format!("{}/classifier", seed_dir(seed)));
        if dir.join("manifest.json").exists() {
            return Classifier::load(&dir);
        }
        let part = self.partition(seed)?;
        let cfg = crate::classifier::PretrainConfig { seed: derive_seed(seed, "classifier"), ..self.config.classifier_pretrain.clone() };
        let out = pretrain_classifier(&part.train_set(&self.dataset), self.config.classifier_arch.clone(), &cfg)?;
        log::info!("seed {seed}: classifier hold-out accuracy {:.4}", out.heldout_accuracy);
        out.classifier.save(&dir)?;
        Ok(out.classifier)
    }

    pub fn pretrained_gan(&self, seed: u64) -> Result<GanCheckpoint> {
        let dir = self.path(&format!("{}/gan", seed_dir(seed)));
        if dir.join("manifest.json").exists() {
            return GanCheckpoint::load(&dir);
        }
        let part = self.partition(seed)?;
        let feature_net = self.classifier(seed)?;
        let mut arch = self.config.gan_arch.clone();
        arch.class_budget = self.dataset.class_count();
        let cfg = crate::training::GanTrainConfig { seed: derive_seed(seed, "gan"), ..self.config.gan_pretrain.clone() };
        let ck = pretrain_gan(&part.train_set(&self.dataset), &arch, &cfg, &feature_net)?;
        ck.save(&dir)?;
        Ok(ck)
    }

    pub fn support(&self, seed: u64, k: usize) -> Result<LabeledImages> {
        let part = self.partition(seed)?;
        Ok(sample_support(&part, &self.dataset, k, derive_seed(self.config.support_seed, &format!("support/{seed}")))?.images(&self.dataset))
    }

    pub fn gan_cells(&self, regime: RegimeKind) -> Vec<GanCell> {
        let g = &self.config.grids;
        let mut out = Vec::new();
        for &dfm in &g.dfm {
            for &gfm in &g.gfm {
                for &p_ada in &g.p_ada {
                    for &alpha in &g.alpha {
                        if (regime == RegimeKind::Gan) == (alpha == 0.0) {
                            out.push(GanCell { dfm, gfm, alpha, p_ada });
                        }
                    }
                }
            }
        }
        out
    }

    /// Fine-tunes (or loads) one GAN cell and scores it against the valid split.
    pub fn finetuned_gan(&self, seed: u64, k: usize, cell: &GanCell) -> Result<GanCellResult> {
        let id = gan_cell_id(seed, k, cell);
        let dir = self.path(&id);
        let part = self.partition(seed)?;
        let feature_net = self.classifier(seed)?;
        let valid = part.valid_set(&self.dataset);
        let checkpoint = if dir.join("manifest.json").exists() {
            GanCheckpoint::load(&dir)?
        } else {
            let base = self.pretrained_gan(seed)?;
            let support = self.support(seed, k)?;
            let cfg = crate::training::GanTrainConfig {
                alpha: cell.alpha,
                p_ada: cell.p_ada,
                seed: derive_seed(seed, &id),
                ..self.config.gan_finetune.clone()
            };
            let ck = finetune_gan(&base, &support, Some(&valid), &TrainableMask::new(cell.dfm, cell.gfm), &cfg, &feature_net, &valid)?;
            ck.save(&dir)?;
            ck
        };
        let fid = checkpoint.best_fid.ok_or_else(|| Error::Consistency(format!("{id} has no FID")))?;
        let pr = self.precision_recall(&checkpoint, &feature_net, &part, derive_seed(seed, &format!("pr/{id}")))?;
        Ok(GanCellResult { checkpoint, fid, pr })
    }

    fn precision_recall(&self, ck: &GanCheckpoint, feature_net: &Classifier, part: &ClassPartition, seed: u64) -> Result<PrecisionRecall> {
        let valid = part.valid_set(&self.dataset);
        let n = self.config.gan_finetune.fid_sample_count.min(valid.len());
        let mut idx: Vec<usize> = (0..valid.len()).collect();
        let (chosen, _) = rand::seq::SliceRandom::partial_shuffle(&mut idx[..], &mut substream(seed, "real"), n);
        let real = valid.select(chosen);
        let classes: Vec<usize> = part.target_classes.iter().copied().collect();
        let per_class = n.div_ceil(classes.len());
        let fake = sample_generator(&ck.sampler(), &classes, per_class, 1.0, seed, valid.shape)?;
        let rf = extract_features(feature_net, &real.batch(&(0..real.len()).collect::<Vec<_>>()), "valid")?;
        let ff = extract_features(feature_net, &fake.batch(&(0..fake.len()).collect::<Vec<_>>()), "generated")?;
        knn_precision_recall(&rf, &ff, self.config.knn_k)
    }

    /// Hyperparameter cells of a classifier regime, in sweep order.
    pub fn regimes(&self, kind: RegimeKind) -> Vec<FinetuneRegime> {
        let g = &self.config.grids;
        let fixed = self.config.fixed_min_scale;
        let base = FinetuneRegime { min_scale: fixed, ..FinetuneRegime::new(kind) };
        match kind {
            RegimeKind::Baseline => vec![FinetuneRegime { min_scale: 1.0, ..base }],
            RegimeKind::BaselineAug => g.min_scale.iter().map(|&m| FinetuneRegime { min_scale: m, ..base.clone() }).collect(),
            RegimeKind::Mixup => g.mixup_beta.iter().map(|&b| FinetuneRegime { mixup_beta: b, ..base.clone() }).collect(),
            RegimeKind::Gan | RegimeKind::GanSemi => g
                .n_s
                .iter()
                .flat_map(|&n_s| g.sigma.iter().map(move |&sigma| (n_s, sigma)))
                .map(|(n_s, sigma)| FinetuneRegime { n_s, sigma, ..base.clone() })
                .collect(),
        }
    }

    /// Fine-tunes one classifier cell; returns the tuned classifier, valid and fake-valid accuracy.
    pub fn finetuned_classifier(
        &self,
        seed: u64,
        k: usize,
        regime: &FinetuneRegime,
        gan: Option<(&str, &GanCheckpoint)>,
    ) -> Result<(Classifier, f64, Option<f64>)> {
        let id = classifier_cell_id(seed, k, regime, gan.map(|g| g.0));
        let part = self.partition(seed)?;
        let targets: Vec<usize> = part.target_classes.iter().copied().collect();
        let mut clf = self.classifier(seed)?;
        clf.replace_head(&targets, derive_seed(seed, "target-head"))?;
        let support = self.support(seed, k)?;
        let train = match gan {
            Some((_, ck)) => generate_augmented_set(ck, &support, regime.n_s, regime.sigma, derive_seed(seed, &format!("augment/{id}")))?,
            None => support,
        };
        let cfg = crate::classifier::FinetuneConfig { seed: derive_seed(seed, &id), ..self.config.classifier_finetune.clone() };
        let out = finetune_classifier(&clf, &train, regime, &part.valid_set(&self.dataset), &cfg)?;
        out.classifier.save(self.path(&id))?;
        let fake = match gan {
            Some((_, ck)) => Some(fake_validation_accuracy(&out.classifier, &ck.sampler(), &targets, self.config.fake_valid_per_class, regime.sigma, derive_seed(seed, &format!("fake-valid/{id}")))?),
            None => None,
        };
        Ok((out.classifier, out.best_valid_accuracy, fake))
    }

    /// Test accuracy of the saved classifier of `cell_id`.
    pub fn test_accuracy(&self, seed: u64, cell_id: &str) -> Result<f64> {
        let clf = Classifier::load(self.path(cell_id))?;
        evaluate_accuracy(&clf, &self.partition(seed)?.test_set(&self.dataset))
    }
}

/// Outcome counts of [`run_pipeline`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineSummary {
    pub records: PathBuf,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl PipelineSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failed == 0
    }
}

struct Runner<'a> {
    ws: &'a Workspace,
    file: RecordFile,
    done: BTreeSet<String>,
    summary: PipelineSummary,
}

impl Runner<'_> {
    fn append(&mut self, row: ExperimentRecord) -> Result<()> {
        if row.ok() {
            self.summary.completed += 1;
            self.done.insert(row.cell_id.clone());
        } else {
            self.summary.failed += 1;
            log::error!("{} failed: {}", row.cell_id, row.error.as_deref().unwrap_or(""));
        }
        self.file.append(&row)
    }

    fn failed(&mut self, cell_id: String, stage: &str, seed: u64, at: Option<(usize, RegimeKind)>, err: &Error) -> Result<()> {
        self.append(ExperimentRecord {
            cell_id,
            status: "failed".into(),
            stage: stage.into(),
            dataset_seed: seed,
            k: at.map(|a| a.0),
            regime: at.map(|a| a.1.to_string()),
            error: Some(err.to_string()),
            ..Default::default()
        })
    }

    /// Runs `f` for a stage-level cell unless it already completed.
    fn stage(&mut self, seed: u64, name: &str, f: impl FnOnce(&Workspace) -> Result<ExperimentRecord>) -> Result<bool> {
        let id = format!("{}/{name}", seed_dir(seed));
        if self.done.contains(&id) {
            self.summary.skipped += 1;
            return Ok(true);
        }
        let t = Instant::now();
        match f(self.ws) {
            Ok(row) => {
                self.append(ExperimentRecord { cell_id: id, status: "ok".into(), stage: name.into(), dataset_seed: seed, wall_time_s: elapsed(t), ..row })?;
                Ok(true)
            }
            Err(e) => {
                self.failed(id, name, seed, None, &e)?;
                Ok(false)
            }
        }
    }

    fn seed(&mut self, seed: u64) -> Result<()> {
        let ws = self.ws;
        if !self.stage(seed, stage::SPLIT, |ws| ws.partition(seed).map(|_| ExperimentRecord { artifact: Some(format!("{}/partition.json", seed_dir(seed))), ..Default::default() }))? {
            return Ok(());
        }
        if !self.stage(seed, stage::PRETRAIN_CLASSIFIER, |ws| ws.classifier(seed).map(|_| ExperimentRecord { artifact: Some(format!("{}/classifier", seed_dir(seed))), ..Default::default() }))? {
            return Ok(());
        }
        let tag = ws.feature_extractor_tag(seed);
        if !self.stage(seed, stage::PRETRAIN_GAN, |ws| {
            ws.pretrained_gan(seed).map(|ck| ExperimentRecord {
                fid: ck.best_fid,
                gamma: Some(ws.config.gan_pretrain.gamma),
                feature_extractor: Some(tag.clone()),
                artifact: Some(format!("{}/gan", seed_dir(seed))),
                ..Default::default()
            })
        })? {
            return Ok(());
        }
        for &k in &ws.config.k {
            for &kind in &ws.config.regimes {
                self.regime(seed, k, kind)?;
            }
        }
        Ok(())
    }

    /// Runs GAN cells for `kind` and returns the id and checkpoint of the lowest-FID cell.
    fn select_gan(&mut self, seed: u64, k: usize, kind: RegimeKind) -> Result<Option<(String, GanCheckpoint)>> {
        let ws = self.ws;
        let mut best: Option<(f64, String, GanCheckpoint)> = None;
        for cell in ws.gan_cells(kind) {
            let id = gan_cell_id(seed, k, &cell);
            let t = Instant::now();
            let resumed = self.done.contains(&id);
            match ws.finetuned_gan(seed, k, &cell) {
                Ok(res) => {
                    if resumed {
                        self.summary.skipped += 1;
                    } else {
                        self.append(ExperimentRecord {
                            cell_id: id.clone(),
                            status: "ok".into(),
                            stage: stage::FINETUNE_GAN.into(),
                            dataset_seed: seed,
                            k: Some(k),
                            regime: Some(kind.to_string()),
                            dfm: Some(cell.dfm.to_string()),
                            gfm: Some(cell.gfm.to_string()),
                            alpha: Some(cell.alpha),
                            gamma: Some(ws.config.gan_finetune.gamma),
                            p_ada: Some(cell.p_ada),
                            fid: Some(res.fid),
                            precision: Some(res.pr.precision),
                            recall: Some(res.pr.recall),
                            feature_extractor: Some(ws.feature_extractor_tag(seed)),
                            wall_time_s: elapsed(t),
                            artifact: Some(id.clone()),
                            ..Default::default()
                        })?;
                    }
                    if best.as_ref().is_none_or(|b| res.fid < b.0) {
                        best = Some((res.fid, id, res.checkpoint));
                    }
                }
                Err(e) => self.failed(id, stage::FINETUNE_GAN, seed, Some((k, kind)), &e)?,
            }
        }
        Ok(best.map(|b| (b.1, b.2)))
    }

    fn regime(&mut self, seed: u64, k: usize, kind: RegimeKind) -> Result<()> {
        let ws = self.ws;
        let test_id = test_cell_id(seed, k, kind);
        if self.done.contains(&test_id) {
            self.summary.skipped += 1;
            return Ok(());
        }
        let gan = if kind.uses_gan() {
            match self.select_gan(seed, k, kind)? {
                Some(g) => Some(g),
                None => {
                    let e = Error::Consistency(format!("no GAN cell succeeded for {kind}"));
                    return self.failed(test_id, stage::FINETUNE_GAN, seed, Some((k, kind)), &e);
                }
            }
        } else {
            None
        };
        for regime in ws.regimes(kind) {
            let id = classifier_cell_id(seed, k, &regime, gan.as_ref().map(|g| g.0.as_str()));
            if self.done.contains(&id) {
                self.summary.skipped += 1;
                continue;
            }
            let t = Instant::now();
            match ws.finetuned_classifier(seed, k, &regime, gan.as_ref().map(|(i, c)| (i.as_str(), c))) {
                Ok((_, valid, fake)) => {
                    let cell = gan.as_ref().map(|g| g.0.clone());
                    self.append(ExperimentRecord {
                        cell_id: id.clone(),
                        status: "ok".into(),
                        stage: stage::FINETUNE_CLASSIFIER.into(),
                        dataset_seed: seed,
                        k: Some(k),
                        regime: Some(kind.to_string()),
                        n_s: kind.uses_gan().then_some(regime.n_s),
                        sigma: kind.uses_gan().then_some(regime.sigma),
                        min_scale: Some(regime.min_scale),
                        mixup_beta: (kind == RegimeKind::Mixup).then_some(regime.mixup_beta),
                        valid_accuracy: Some(valid),
                        fake_valid_accuracy: fake,
                        selected_cell: cell,
                        feature_extractor: Some(ws.feature_extractor_tag(seed)),
                        wall_time_s: elapsed(t),
                        artifact: Some(id.clone()),
                        ..Default::default()
                    })?;
                }
                Err(e) => self.failed(id, stage::FINETUNE_CLASSIFIER, seed, Some((k, kind)), &e)?,
            }
        }
        self.test(seed, k, kind)
    }

    /// Evaluates the test split once, at the valid-best cell.
    fn test(&mut self, seed: u64, k: usize, kind: RegimeKind) -> Result<()> {
        let ws = self.ws;
        let test_id = test_cell_id(seed, k, kind);
        let rows = self.file.read()?;
        let best = rows
            .iter()
            .filter(|r| r.ok() && r.stage == stage::FINETUNE_CLASSIFIER && r.dataset_seed == seed && r.k == Some(k) && r.regime.as_deref() == Some(kind.as_str()))
            .fold(None::<&ExperimentRecord>, |b, r| match b {
                Some(b) if b.valid_accuracy >= r.valid_accuracy => Some(b),
                _ => Some(r),
            });
        let Some(best) = best.cloned() else {
            let e = Error::Consistency(format!("no classifier cell succeeded for {kind}"));
            return self.failed(test_id, stage::TEST, seed, Some((k, kind)), &e);
        };
        let t = Instant::now();
        match ws.test_accuracy(seed, &best.cell_id) {
            Ok(acc) => self.append(ExperimentRecord {
                cell_id: test_id,
                status: "ok".into(),
                stage: stage::TEST.into(),
                test_accuracy: Some(acc),
                selected_cell: Some(best.cell_id.clone()),
                wall_time_s: elapsed(t),
                error: None,
                ..best
            }),
            Err(e) => self.failed(test_id, stage::TEST, seed, Some((k, kind)), &e),
        }
    }
}

/// Runs every seed of `config`, appending to `<root>/records.csv`; completed
/// cells found in an existing record file are skipped.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineSummary> {
    let ws = Workspace::new(config.clone())?;
    let file = ws.records();
    file.write_manifest(serde_json::to_value(config)?)?;
    let done = file.completed()?;
    let mut runner = Runner { ws: &ws, summary: PipelineSummary { records: file.path().to_path_buf(), ..Default::default() }, file, done };
    for &seed in &config.dataset_seeds {
        runner.seed(seed)?;
    }
    Ok(runner.summary)
}

/// Rows whose `(seed, k, regime)` carries more than one test accuracy.
pub fn audit_test_evaluations(records: &[ExperimentRecord]) -> Vec<String> {
    let mut seen = std::collections::BTreeMap::<(u64, Option<usize>, Option<String>), usize>::new();
    for r in records.iter().filter(|r| r.test_accuracy.is_some()) {
        *seen.entry((r.dataset_seed, r.k, r.regime.clone())).or_default() += 1;
    }
    seen.into_iter().filter(|(_, n)| *n > 1).map(|((s, k, r), n)| format!("seed {s} k {k:?} regime {r:?}: {n} test evaluations")).collect()
}

