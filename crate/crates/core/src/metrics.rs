//! Feature statistics, Fréchet distance and kNN precision/recall.

use fsaug_autograd::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate_accuracy, Classifier};
use crate::dataset::{to_unit, LabeledImages};
use crate::error::{ensure, Error, Result};
use crate::gan::Generator;
use crate::rng::{normal_vec, substream};

/// Eigenvalues above this (negative) bound are treated as zero.
pub const EIG_CLIP: f64 = -1e-6;

/// Row-major `n x dim` feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub provenance: String,
}

impl FeatureSet {
    pub fn new(n: usize, dim: usize, data: Vec<f64>, provenance: impl Into<String>) -> Result<Self> {
        ensure!(data.len() == n * dim, Argument, "{} values for a {n}x{dim} feature matrix", data.len());
        ensure!(data.iter().all(|v| v.is_finite()), Numerical, "features must be finite");
        Ok(FeatureSet { n, dim, data, provenance: provenance.into() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Penultimate activations of `feature_net` for `[0, 1]` images `[N, C, H, W]`.
pub fn extract_features(feature_net: &Classifier, images: &Tensor<f32>, provenance: &str) -> Result<FeatureSet> {
    let f = feature_net.features(images)?;
    let (n, dim) = (f.dim(0), f.dim(1));
    FeatureSet::new(n, dim, f.data().iter().map(|&v| v as f64).collect(), provenance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major, symmetric.
    pub cov: Vec<f64>,
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(features: &FeatureSet) -> Result<GaussianStats> {
    let (n, d) = (features.n, features.dim);
    ensure!(n >= 2, Argument, "fitting a Gaussian needs at least 2 rows, got {n}");
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n).flat_map(|i| features.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>()).collect();
    let mut cov = vec![0.0; d * d];
    fsaug_autograd::gemm(
        fsaug_autograd::MatRef::new(&centered, n, d).t(),
        fsaug_autograd::MatRef::new(&centered, n, d),
        &mut cov,
        0.0,
    );
    let inv = 1.0 / (n as f64 - 1.0);
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (cov[i * d + j] + cov[j * d + i]) * inv;
        }
    }
    Ok(GaussianStats { dim: d, mean, cov: sym })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and row-major eigenvectors stored column-wise.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j] * m[i * n + j]).sum::<f64>().sqrt();
        if off <= 1e-15 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

fn clipped(eigs: &mut [f64], scale: f64, what: &str) -> Result<()> {
    let bound = EIG_CLIP * scale.max(1.0);
    for e in eigs.iter_mut() {
        if *e < bound {
            return Err(Error::Numerical(format!("{what} has eigenvalue {e:.3e} below {bound:.1e}")));
        }
        *e = e.max(0.0);
    }
    Ok(())
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    fsaug_autograd::gemm(fsaug_autograd::MatRef::new(a, n, n), fsaug_autograd::MatRef::new(b, n, n), &mut out, 0.0);
    out
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    ensure!(a.dim == b.dim, Argument, "feature dimensions differ: {} vs {}", a.dim, b.dim);
    let n = a.dim;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &[f64]| (0..n).map(|i| m[i * n + i]).sum::<f64>();
    let scale = trace(&a.cov).abs().max(trace(&b.cov).abs()) / n.max(1) as f64;

    let (mut ea, va) = symmetric_eigen(&a.cov, n);
    clipped(&mut ea, scale, "first covariance")?;
    let mut root = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            root[i * n + j] = (0..n).map(|k| va[i * n + k] * ea[k].sqrt() * va[j * n + k]).sum();
        }
    }
    let mut inner = matmul(&matmul(&root, &b.cov, n), &root, n);
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = s;
            inner[j * n + i] = s;
        }
    }
    let (mut eigs, _) = symmetric_eigen(&inner, n);
    clipped(&mut eigs, scale * scale, "covariance product")?;
    let tr_sqrt: f64 = eigs.iter().map(|e| e.sqrt()).sum();
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub k_nn: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance to the `k`-th nearest other point of the same set.
fn knn_radii(set: &FeatureSet, k: usize) -> Vec<f64> {
    (0..set.n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..set.n).filter(|&j| j != i).map(|j| sq_dist(set.row(i), set.row(j))).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(points: &FeatureSet, manifold: &FeatureSet, radii: &[f64]) -> f64 {
    let hits = (0..points.n)
        .into_par_iter()
        .filter(|&i| (0..manifold.n).any(|j| sq_dist(points.row(i), manifold.row(j)) <= radii[j]))
        .count();
    hits as f64 / points.n as f64
}

/// Improved precision (fake inside the real manifold) and recall (real inside the fake manifold).
pub fn knn_precision_recall(real: &FeatureSet, fake: &FeatureSet, k_nn: usize) -> Result<PrecisionRecall> {
    ensure!(k_nn >= 1, Argument, "k_nn must be at least 1");
    ensure!(real.dim == fake.dim, Argument, "feature dimensions differ: {} vs {}", real.dim, fake.dim);
    ensure!(real.n > k_nn && fake.n > k_nn, Argument, "both sets need more than {k_nn} points (got {} and {})", real.n, fake.n);
    let real_r = knn_radii(real, k_nn);
    let fake_r = knn_radii(fake, k_nn);
    Ok(PrecisionRecall { precision: coverage(fake, real, &real_r), recall: coverage(real, fake, &fake_r), k_nn })
}

/// Samples `n` images per class from `generator` with `z ~ N(0, sigma^2 I)`, rescaled to `[0, 1]`.
pub fn sample_generator(generator: &Generator<f32>, classes: &[usize], n_per_class: usize, sigma: f64, seed: u64, shape: crate::dataset::ImageShape) -> Result<LabeledImages> {
    ensure!(sigma > 0.0, Argument, "sigma must be positive");
    let mut out = LabeledImages::empty(shape);
    let latent = generator.arch.latent_dim;
    for &c in classes {
        let mut rng = substream(seed, &format!("sample/{c}"));
        for start in (0..n_per_class).step_by(256) {
            let b = (n_per_class - start).min(256);
            let z = Tensor::new(&[b, latent], normal_vec(&mut rng, b * latent, sigma).into_iter().map(|v| v as f32).collect());
            let imgs = to_unit(&generator.generate(&z, &vec![c; b])?);
            for chunk in imgs.data().chunks(shape.numel()) {
                out.push(chunk, c);
            }
        }
    }
    Ok(out)
}

/// Accuracy on a fresh GAN-sampled "fake" validation set.
pub fn fake_validation_accuracy(classifier: &Classifier, generator: &Generator<f32>, target_classes: &[usize], n_per_class: usize, sigma: f64, seed: u64) -> Result<f64> {
    ensure!(n_per_class >= 1, Argument, "need at least one sample per class");
    let a = &generator.arch;
    let shape = crate::dataset::ImageShape::new(a.image_channels, a.image_side, a.image_side);
    let fake = sample_generator(generator, target_classes, n_per_class, sigma, crate::rng::derive_seed(seed, "fake-valid"), shape)?;
    evaluate_accuracy(classifier, &fake)
}
