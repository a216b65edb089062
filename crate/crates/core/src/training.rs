//! GAN pre-training and fine-tuning with FID early stopping.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use fsaug_autograd::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::container::{self, NamedTensor};
use crate::dataset::{to_signed, to_unit, ImageShape, LabeledImages};
use crate::error::{ensure, Error, Result};
use crate::gan::{ema_update, Discriminator, GanArch, Generator, TrainableMask};
use crate::metrics::{extract_features, fit_gaussian, frechet_distance, sample_generator, GaussianStats};
use crate::objectives::graph::{fake_term, infogan_loss, real_term};
use crate::objectives::LossBreakdown;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, fnv1a, normal_vec, substream, Stream};
use crate::store::{Bound, ParamStore};

const GEN_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub d_steps_per_g_step: usize,
    /// Weight of the latent reconstruction term.
    pub gamma: f64,
    /// Weight of the unconditional (unlabeled) game; 0 is fully supervised.
    pub alpha: f64,
    pub batch_size: usize,
    /// Generator steps between FID evaluations.
    pub fid_every: usize,
    pub fid_sample_count: usize,
    /// Non-improving FID evaluations tolerated before stopping.
    pub patience: usize,
    /// Generator steps.
    pub max_steps: usize,
    pub seed: u64,
    /// Probability of a flip/rotation/translation on each discriminator input.
    pub p_ada: f64,
    pub ema_decay: Option<f64>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            learning_rate: 2e-4,
            adam_betas: (0.0, 0.9),
            adam_eps: 1e-8,
            d_steps_per_g_step: 5,
            gamma: 100.0,
            alpha: 0.0,
            batch_size: 64,
            fid_every: 500,
            fid_sample_count: 5000,
            patience: 10,
            max_steps: 20_000,
            seed: 0,
            p_ada: 0.0,
            ema_decay: None,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        ensure!(self.d_steps_per_g_step >= 1, Config, "d_steps_per_g_step must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.fid_every >= 1, Config, "fid_every must be positive");
        ensure!(self.fid_sample_count >= 2, Config, "FID needs at least 2 samples");
        ensure!(self.gamma >= 0.0 && self.gamma.is_finite(), Config, "gamma must be non-negative");
        ensure!(self.alpha >= 0.0 && self.alpha.is_finite(), Config, "alpha must be non-negative");
        ensure!((0.0..=1.0).contains(&self.p_ada), Config, "p_ada must lie in [0, 1]");
        if let Some(d) = self.ema_decay {
            ensure!((0.0..1.0).contains(&d), Config, "EMA decay must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_betas.0, beta2: self.adam_betas.1, eps: self.adam_eps }
    }

    /// Stable hash of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub total_d: Option<f64>,
    pub total_g: Option<f64>,
    pub info: Option<f64>,
    pub fid: Option<f64>,
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(Error::io(path))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(Error::io(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Generator/discriminator pair with optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct GanCheckpoint {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    pub ema: Option<ParamStore<f32>>,
    pub step: usize,
    pub best_fid: Option<f64>,
    pub fingerprint: String,
    pub trace: Vec<TraceRecord>,
}

impl GanCheckpoint {
    /// Freshly initialized networks.
    pub fn initial(arch: &GanArch, config: &GanTrainConfig) -> Result<Self> {
        Ok(GanCheckpoint {
            generator: Generator::new(arch.clone(), derive_seed(config.seed, "generator-init"))?,
            discriminator: Discriminator::new(arch.clone(), derive_seed(config.seed, "discriminator-init"))?,
            g_opt: Adam::new(config.adam()),
            d_opt: Adam::new(config.adam()),
            ema: None,
            step: 0,
            best_fid: None,
            fingerprint: config.fingerprint(),
            trace: Vec::new(),
        })
    }

    /// The generator used for sampling: EMA weights when tracked.
    pub fn sampler(&self) -> Generator<f32> {
        match &self.ema {
            Some(p) => Generator { arch: self.generator.arch.clone(), params: p.clone() },
            None => self.generator.clone(),
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        let a = &self.generator.arch;
        ImageShape::new(a.image_channels, a.image_side, a.image_side)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut tensors: Vec<NamedTensor<f32>> = self.generator.params.to_named("g/");
        tensors.extend(self.discriminator.params.to_named("d/"));
        if let Some(e) = &self.ema {
            tensors.extend(e.to_named("ema/"));
        }
        tensors.extend(self.g_opt.to_named("adam_g/"));
        tensors.extend(self.d_opt.to_named("adam_d/"));
        let meta = serde_json::json!({
            "kind": "gan",
            "arch": self.generator.arch,
            "discriminator_arch": self.discriminator.arch,
            "step": self.step,
            "best_fid": self.best_fid,
            "fingerprint": self.fingerprint,
            "g_adam": { "config": self.g_opt.config, "step": self.g_opt.step_count() },
            "d_adam": { "config": self.d_opt.config, "step": self.d_opt.step_count() },
        });
        container::save(dir, &tensors, meta)?;
        write_trace(dir.join("trace.jsonl"), &self.trace)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (tensors, meta) = container::load::<f32>(dir)?;
        ensure!(meta["kind"] == "gan", Consistency, "{} does not hold a GAN checkpoint", dir.display());
        let adam = |key: &str, prefix: &str| -> Result<Adam<f32>> {
            let config = serde_json::from_value(meta[key]["config"].clone())?;
            let step = meta[key]["step"].as_u64().unwrap_or(0);
            Adam::from_named(config, step, &tensors, prefix)
        };
        let ema = ParamStore::from_named(&tensors, "ema/")?;
        let trace_path = dir.join("trace.jsonl");
        Ok(GanCheckpoint {
            generator: Generator { arch: serde_json::from_value(meta["arch"].clone())?, params: ParamStore::from_named(&tensors, "g/")? },
            discriminator: Discriminator {
                arch: serde_json::from_value(meta["discriminator_arch"].clone())?,
                params: ParamStore::from_named(&tensors, "d/")?,
            },
            g_opt: adam("g_adam", "adam_g/")?,
            d_opt: adam("d_adam", "adam_d/")?,
            ema: (!ema.is_empty()).then_some(ema),
            step: meta["step"].as_u64().unwrap_or(0) as usize,
            best_fid: meta["best_fid"].as_f64(),
            fingerprint: meta["fingerprint"].as_str().unwrap_or_default().to_string(),
            trace: if trace_path.exists() { read_trace(trace_path)? } else { Vec::new() },
        })
    }
}

/// FID against a reference sample fixed once per run, with fixed latent codes.
pub struct FidProbe<'a> {
    feature_net: &'a Classifier,
    reference: GaussianStats,
    labels: Vec<usize>,
    z: Tensor<f32>,
    shape: ImageShape,
}

impl<'a> FidProbe<'a> {
    pub fn new(feature_net: &'a Classifier, reference_set: &LabeledImages, n: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        ensure!(reference_set.len() >= 2, Argument, "FID reference needs at least 2 images");
        let n = n.min(reference_set.len());
        let mut idx: Vec<usize> = (0..reference_set.len()).collect();
        let (chosen, _) = idx.partial_shuffle(&mut substream(seed, "fid-reference"), n);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        let real = reference_set.select(&chosen);
        let feats = extract_features(feature_net, &real.batch(&(0..real.len()).collect::<Vec<_>>()), "fid-reference")?;
        if n < 2 * feats.dim {
            log::warn!("FID uses {n} samples for {}-dimensional features; covariance will be rank deficient", feats.dim);
        }
        let z = Tensor::new(&[n, latent_dim], normal_vec(&mut substream(seed, "fid-z"), n * latent_dim, 1.0).into_iter().map(|v| v as f32).collect());
        Ok(FidProbe { feature_net, reference: fit_gaussian(&feats)?, labels: real.labels, z, shape: reference_set.shape })
    }

    pub fn evaluate(&self, generator: &Generator<f32>) -> Result<f64> {
        let n = self.labels.len();
        let mut parts = Vec::new();
        for start in (0..n).step_by(GEN_CHUNK) {
            let end = (start + GEN_CHUNK).min(n);
            parts.push(to_unit(&generator.generate(&self.z.slice_outer(start, end), &self.labels[start..end])?));
        }
        let images = Tensor::concat_outer(&parts.iter().collect::<Vec<_>>());
        ensure!(images.shape()[1..] == [self.shape.channels, self.shape.height, self.shape.width], Argument, "generator and reference image shapes differ");
        let feats = extract_features(self.feature_net, &images, "fid-generated")?;
        frechet_distance(&self.reference, &fit_gaussian(&feats)?)
    }
}

/// Random flip, quarter turn or translation per sample, applied with probability `p`.
fn ada_map<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Option<Arc<Vec<Option<usize>>>> {
    if p <= 0.0 {
        return None;
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut map = Vec::with_capacity(b * c * h * w);
    let max_shift = (h.max(w) / 8).max(1) as i64;
    for s in 0..b {
        let kind = if rng.random::<f64>() < p { rng.random_range(1..=5u8) } else { 0 };
        let (dx, dy) = if kind == 5 { (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift)) } else { (0, 0) };
        for ch in 0..c {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (si, sj) = match kind {
                        1 => (i, w as i64 - 1 - j),
                        2 => (j, w as i64 - 1 - i),
                        3 => (h as i64 - 1 - i, w as i64 - 1 - j),
                        4 => (h as i64 - 1 - j, i),
                        5 => (i - dy, j - dx),
                        _ => (i, j),
                    };
                    let inside = si >= 0 && sj >= 0 && si < h as i64 && sj < w as i64;
                    map.push(inside.then(|| ((s * c + ch) * h + si as usize) * w + sj as usize));
                }
            }
        }
    }
    Some(Arc::new(map))
}

fn maybe_ada<'g, T: Scalar>(x: Var<'g, T>, p: f64, rng: &mut Stream) -> Var<'g, T> {
    let shape = x.shape();
    match ada_map(&shape, p, rng) {
        Some(map) => x.gather_elements(&shape, map),
        None => x,
    }
}

/// Loss weights shared by both players.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
}

/// Inputs of one discriminator update; images in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct DiscriminatorBatch<T> {
    pub real: Tensor<T>,
    pub real_labels: Vec<usize>,
    pub z: Tensor<T>,
    pub fake_labels: Vec<usize>,
    /// Unlabeled images; required when `alpha > 0`.
    pub unlabeled: Option<Tensor<T>>,
}

fn scalar<T: Scalar>(v: Var<'_, T>) -> f64 {
    v.value().item().as_f64()
}

/// Discriminator objective: conditional real/fake terms, `gamma` times the
/// latent reconstruction error and, when `alpha > 0`, `alpha` times the
/// unconditional real/fake terms on the unlabeled images. Generated images
/// enter as constants. `augment` is applied to real, generated and
/// unlabeled inputs in that order.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_objective<'g, T: Scalar>(
    generator: &Generator<T>,
    gb: &Bound<'g, '_, T>,
    discriminator: &Discriminator<T>,
    db: &Bound<'g, '_, T>,
    graph: &'g Graph<T>,
    batch: &DiscriminatorBatch<T>,
    weights: LossWeights,
    augment: &mut dyn FnMut(Var<'g, T>) -> Var<'g, T>,
    out: &mut LossBreakdown,
) -> Result<Var<'g, T>> {
    let x_real = augment(graph.constant(batch.real.clone()));
    let fake = generator.forward(gb, graph.constant(batch.z.clone()), &batch.fake_labels)?;
    let fake = augment(graph.constant_shared(fake.value()));
    let real_out = discriminator.forward(db, x_real, Some(&batch.real_labels))?;
    let fake_out = discriminator.forward(db, fake, Some(&batch.fake_labels))?;
    let d_real = real_term(real_out.conditional.expect("labels given"));
    let d_fake = fake_term(fake_out.conditional.expect("labels given"));
    let info = infogan_loss(fake_out.z_prediction, graph.constant(batch.z.clone()));
    let mut total = d_real + d_fake + info.scale(T::lit(weights.gamma));
    out.d_real = scalar(d_real);
    out.d_fake = scalar(d_fake);
    out.info = scalar(info);
    out.d_unsup_real = 0.0;
    out.d_unsup_fake = 0.0;
    if weights.alpha > 0.0 {
        let unlabeled = batch.unlabeled.as_ref().ok_or_else(|| Error::Argument("alpha > 0 needs unlabeled images".into()))?;
        let u = augment(graph.constant(unlabeled.clone()));
        let ur = real_term(discriminator.forward(db, u, None)?.unconditional);
        let uf = fake_term(fake_out.unconditional);
        out.d_unsup_real = scalar(ur);
        out.d_unsup_fake = scalar(uf);
        total = total + (ur + uf).scale(T::lit(weights.alpha));
    }
    out.total_d = scalar(total);
    Ok(total)
}

/// Generator objective: non-saturating conditional term, `gamma` times the
/// latent reconstruction error and `alpha` times the unconditional term.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<'g, T: Scalar>(
    generator: &Generator<T>,
    gb: &Bound<'g, '_, T>,
    discriminator: &Discriminator<T>,
    db: &Bound<'g, '_, T>,
    graph: &'g Graph<T>,
    z: &Tensor<T>,
    labels: &[usize],
    weights: LossWeights,
    augment: &mut dyn FnMut(Var<'g, T>) -> Var<'g, T>,
    out: &mut LossBreakdown,
) -> Result<Var<'g, T>> {
    let fake = augment(generator.forward(gb, graph.constant(z.clone()), labels)?);
    let o = discriminator.forward(db, fake, Some(labels))?;
    let adv = real_term(o.conditional.expect("labels given"));
    let info = infogan_loss(o.z_prediction, graph.constant(z.clone()));
    let mut total = adv + info.scale(T::lit(weights.gamma));
    out.g_adv = scalar(adv);
    out.g_unsup = 0.0;
    if weights.alpha > 0.0 {
        let un = real_term(o.unconditional);
        out.g_unsup = scalar(un);
        total = total + un.scale(T::lit(weights.alpha));
    }
    out.total_g = scalar(total);
    Ok(total)
}

fn diverged(step: usize, out: &LossBreakdown) -> Error {
    Error::Divergence { step: step + 1, diagnostics: serde_json::to_string(out).unwrap_or_default() }
}

enum LabelPrior {
    /// Labels copied from random training examples.
    Empirical(Vec<usize>),
    /// Uniform over the listed classes.
    Uniform(Vec<usize>),
}

impl LabelPrior {
    fn sample(&self, n: usize, rng: &mut Stream) -> Vec<usize> {
        let v = match self {
            LabelPrior::Empirical(v) | LabelPrior::Uniform(v) => v,
        };
        (0..n).map(|_| v[rng.random_range(0..v.len())]).collect()
    }
}

struct Rngs {
    batches: Stream,
    pool: Stream,
    latent: Stream,
    labels: Stream,
    ada: Stream,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Rngs {
            batches: substream(seed, "batches"),
            pool: substream(seed, "pool"),
            latent: substream(seed, "latent"),
            labels: substream(seed, "fake-labels"),
            ada: substream(seed, "ada"),
        }
    }
}

fn draw(n: usize, batch: usize, rng: &mut Stream) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    let (chosen, _) = all.partial_shuffle(rng, batch.min(n));
    chosen.to_vec()
}

fn latent(rng: &mut Stream, batch: usize, dim: usize) -> Tensor<f32> {
    Tensor::new(&[batch, dim], normal_vec(rng, batch * dim, 1.0).into_iter().map(|v| v as f32).collect())
}

struct Loop<'a> {
    ck: GanCheckpoint,
    mask: &'a TrainableMask,
    config: &'a GanTrainConfig,
    labeled: &'a LabeledImages,
    pool: Option<&'a LabeledImages>,
    prior: LabelPrior,
    rngs: Rngs,
}

impl Loop<'_> {
    fn weights(&self) -> LossWeights {
        LossWeights { gamma: self.config.gamma, alpha: self.config.alpha }
    }

    fn d_step(&mut self, out: &mut LossBreakdown) -> Result<()> {
        let cfg = self.config;
        let weights = self.weights();
        let (gen, disc) = (&self.ck.generator, &self.ck.discriminator);
        let idx = draw(self.labeled.len(), cfg.batch_size, &mut self.rngs.batches);
        let b = idx.len();
        let z = latent(&mut self.rngs.latent, b, gen.arch.latent_dim);
        let batch = DiscriminatorBatch {
            real: to_signed(&self.labeled.batch(&idx)),
            real_labels: idx.iter().map(|&i| self.labeled.labels[i]).collect(),
            z,
            fake_labels: self.prior.sample(b, &mut self.rngs.labels),
            unlabeled: match self.pool {
                Some(pool) if cfg.alpha > 0.0 => Some(to_signed(&pool.batch(&draw(pool.len(), cfg.batch_size, &mut self.rngs.pool)))),
                _ => None,
            },
        };
        let ada = &mut self.rngs.ada;
        let grads = {
            let g = Graph::new();
            let gb = gen.params.bind_constant(&g);
            let db = disc.params.bind(&g, |p| self.mask.discriminator.contains(&p.group));
            let total = discriminator_objective(gen, &gb, disc, &db, &g, &batch, weights, &mut |x| maybe_ada(x, cfg.p_ada, ada), out)?;
            if !total.value().all_finite() {
                return Err(diverged(self.ck.step, out));
            }
            db.gradients(&g.backward(total))
        };
        self.ck.d_opt.update(&mut self.ck.discriminator.params, grads);
        Ok(())
    }

    fn g_step(&mut self, out: &mut LossBreakdown) -> Result<()> {
        let cfg = self.config;
        let weights = self.weights();
        let (gen, disc) = (&self.ck.generator, &self.ck.discriminator);
        let b = cfg.batch_size.min(self.labeled.len());
        let z = latent(&mut self.rngs.latent, b, gen.arch.latent_dim);
        let labels = self.prior.sample(b, &mut self.rngs.labels);
        let ada = &mut self.rngs.ada;
        let grads = {
            let g = Graph::new();
            let gb = gen.params.bind(&g, |p| self.mask.generator.contains(&p.group));
            let db = disc.params.bind_constant(&g);
            let total = generator_objective(gen, &gb, disc, &db, &g, &z, &labels, weights, &mut |x| maybe_ada(x, cfg.p_ada, ada), out)?;
            if !total.value().all_finite() {
                return Err(diverged(self.ck.step, out));
            }
            gb.gradients(&g.backward(total))
        };
        self.ck.g_opt.update(&mut self.ck.generator.params, grads);
        if let Some(decay) = cfg.ema_decay {
            let ema = self.ck.ema.get_or_insert_with(|| self.ck.generator.params.clone());
            ema_update(ema, &self.ck.generator.params, decay)?;
        }
        Ok(())
    }

    fn step(&mut self, losses: &mut LossBreakdown) -> Result<()> {
        for _ in 0..self.config.d_steps_per_g_step {
            self.d_step(losses)?;
        }
        self.g_step(losses)?;
        self.ck.step += 1;
        self.ck.trace.push(TraceRecord { step: self.ck.step, total_d: Some(losses.total_d), total_g: Some(losses.total_g), info: Some(losses.info), fid: None });
        Ok(())
    }

    fn run(mut self, probe: &FidProbe) -> Result<GanCheckpoint> {
        let cfg = self.config;
        let fid0 = probe.evaluate(&self.ck.sampler())?;
        self.ck.best_fid = Some(fid0);
        self.ck.trace.push(TraceRecord { step: self.ck.step, total_d: None, total_g: None, info: None, fid: Some(fid0) });
        let mut best = self.ck.clone();
        let mut stale = 0;
        for s in 1..=cfg.max_steps {
            let mut losses = LossBreakdown::default();
            self.step(&mut losses)?;
            if s % cfg.fid_every == 0 || s == cfg.max_steps {
                let fid = probe.evaluate(&self.ck.sampler())?;
                self.ck.trace.last_mut().expect("step pushed a record").fid = Some(fid);
                log::info!("step {}: d {:.4} g {:.4} info {:.4} fid {fid:.4}", self.ck.step, losses.total_d, losses.total_g, losses.info);
                if fid < best.best_fid.unwrap_or(f64::INFINITY) {
                    self.ck.best_fid = Some(fid);
                    best = self.ck.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
        best.trace = self.ck.trace;
        Ok(best)
    }
}

/// Trains both networks from scratch on the source classes.
pub fn pretrain_gan(train: &LabeledImages, arch: &GanArch, config: &GanTrainConfig, feature_net: &Classifier) -> Result<GanCheckpoint> {
    config.validate()?;
    ensure!(!train.is_empty(), EmptyDataset, "GAN pre-training set is empty");
    ensure!(train.labels.iter().all(|&l| l < arch.class_budget), Index, "training labels exceed the class budget of {}", arch.class_budget);
    ensure!(config.alpha == 0.0 || config.max_steps == 0, Config, "pre-training has no unlabeled pool; set alpha to 0");
    let ck = GanCheckpoint::initial(arch, config)?;
    let probe = FidProbe::new(feature_net, train, config.fid_sample_count, arch.latent_dim, derive_seed(config.seed, "fid"))?;
    let mask = TrainableMask::everything();
    let lp = Loop { ck, mask: &mask, config, labeled: train, pool: None, prior: LabelPrior::Empirical(train.labels.clone()), rngs: Rngs::new(config.seed) };
    lp.run(&probe)
}

fn finetune_loop<'a>(
    checkpoint: &GanCheckpoint,
    support: &'a LabeledImages,
    unlabeled_pool: Option<&'a LabeledImages>,
    mask: &'a TrainableMask,
    config: &'a GanTrainConfig,
) -> Result<Loop<'a>> {
    config.validate()?;
    ensure!(!support.is_empty(), EmptyDataset, "support set is empty");
    let budget = checkpoint.generator.class_budget().min(checkpoint.discriminator.class_budget());
    ensure!(support.labels.iter().all(|&l| l < budget), Index, "support labels exceed the class budget of {budget}");
    if config.alpha > 0.0 {
        ensure!(unlabeled_pool.is_some_and(|p| !p.is_empty()), Config, "alpha > 0 requires a non-empty unlabeled pool");
    }
    let mut ck = checkpoint.clone();
    ck.g_opt = Adam::new(config.adam());
    ck.d_opt = Adam::new(config.adam());
    ck.fingerprint = config.fingerprint();
    ck.trace = Vec::new();
    ck.best_fid = None;
    if config.ema_decay.is_some() {
        ck.ema = Some(ck.generator.params.clone());
    }
    Ok(Loop {
        ck,
        mask,
        config,
        labeled: support,
        pool: unlabeled_pool,
        prior: LabelPrior::Uniform(support.classes()),
        rngs: Rngs::new(config.seed),
    })
}

/// Adapts a pre-trained pair to the support classes; only `mask` groups change.
/// Fake labels are drawn uniformly from the support classes.
pub fn finetune_gan(
    checkpoint: &GanCheckpoint,
    support: &LabeledImages,
    unlabeled_pool: Option<&LabeledImages>,
    mask: &TrainableMask,
    config: &GanTrainConfig,
    feature_net: &Classifier,
    reference_valid: &LabeledImages,
) -> Result<GanCheckpoint> {
    let lp = finetune_loop(checkpoint, support, unlabeled_pool, mask, config)?;
    let probe = FidProbe::new(feature_net, reference_valid, config.fid_sample_count, lp.ck.generator.arch.latent_dim, derive_seed(config.seed, "fid"))?;
    lp.run(&probe)
}

/// Exactly `config.max_steps` fine-tuning steps without FID evaluation or
/// early stopping; returns the final state.
pub fn finetune_steps(
    checkpoint: &GanCheckpoint,
    support: &LabeledImages,
    unlabeled_pool: Option<&LabeledImages>,
    mask: &TrainableMask,
    config: &GanTrainConfig,
) -> Result<GanCheckpoint> {
    let mut lp = finetune_loop(checkpoint, support, unlabeled_pool, mask, config)?;
    for _ in 0..config.max_steps {
        let mut losses = LossBreakdown::default();
        lp.step(&mut losses)?;
    }
    Ok(lp.ck)
}

/// The support set followed by `n_s` generated images per support class.
pub fn generate_augmented_set(checkpoint: &GanCheckpoint, support: &LabeledImages, n_s: usize, sigma: f64, seed: u64) -> Result<LabeledImages> {
    ensure!(sigma > 0.0, Argument, "sigma must be positive");
    let mut out = support.clone();
    if n_s > 0 {
        out.extend(&sample_generator(&checkpoint.sampler(), &support.classes(), n_s, sigma, seed, support.shape)?);
    }
    Ok(out)
}
