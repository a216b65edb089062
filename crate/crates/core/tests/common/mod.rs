//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fsaug::classifier::{Classifier, ClassifierArch};
use fsaug::dataset::{ImageShape, LabeledImages};
use fsaug::gan::GanArch;
use fsaug::metrics::{FeatureSet, GaussianStats};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `ln(1 + e^x)` by the textbook formula; fine for |x| well below 700.
pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// `-E log sigmoid(real) - E log(1 - sigmoid(fake))`.
pub fn d_loss(real: &[f64], fake: &[f64]) -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    -mean(real.iter().map(|&x| sig(x).ln())) - mean(fake.iter().map(|&x| (1.0 - sig(x)).ln()))
}

/// `-E log sigmoid(fake)`.
pub fn g_loss(fake: &[f64]) -> f64 {
    mean(fake.iter().map(|&x| softplus(-x)))
}

pub fn info_loss(pred: &[f64], z: &[f64]) -> f64 {
    mean(pred.iter().zip(z).map(|(a, b)| (a - b).powi(2)))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance via nalgebra's symmetric eigendecomposition.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let n = a.dim;
    let ca = DMatrix::from_row_slice(n, n, &a.cov);
    let cb = DMatrix::from_row_slice(n, n, &b.cov);
    let ra = sqrt_psd(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    (dm.norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Mean and unbiased covariance by direct summation.
pub fn gaussian(rows: &[Vec<f64>]) -> GaussianStats {
    let (n, d) = (rows.len(), rows[0].len());
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = rows.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1) as f64;
        }
    }
    GaussianStats { dim: d, mean: mu, cov }
}

/// Random `d x d` SPD matrix `A A^T + 0.1 I`.
pub fn random_spd(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    m.transpose().as_slice().to_vec()
}

pub fn features(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::new(rows.len(), rows[0].len(), rows.concat(), "test").unwrap()
}

/// Brute-force improved precision/recall with Euclidean (not squared) distances.
pub fn precision_recall(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        set.iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<f64> = set.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| dist(p, q)).collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[k - 1]
            })
            .collect()
    };
    let frac = |pts: &[Vec<f64>], man: &[Vec<f64>], r: &[f64]| {
        pts.iter().filter(|p| man.iter().zip(r).any(|(m, &rad)| dist(p, m) <= rad)).count() as f64 / pts.len() as f64
    };
    let (rr, fr) = (radii(real), radii(fake));
    (frac(fake, real, &rr), frac(real, fake, &fr))
}

/// 8x8 grayscale, two blocks.
pub fn tiny_arch(class_budget: usize) -> GanArch {
    GanArch::tiny(class_budget)
}

/// Random `[0, 1]` images with the given labels.
pub fn random_images(r: &mut ChaCha8Rng, shape: ImageShape, labels: &[usize]) -> LabeledImages {
    let mut out = LabeledImages::empty(shape);
    for &l in labels {
        let img: Vec<f32> = (0..shape.numel()).map(|_| r.random_range(0.0..1.0)).collect();
        out.push(&img, l);
    }
    out
}

/// Untrained classifier serving as a fixed feature map for FID probes.
pub fn feature_net(side: usize) -> Classifier {
    Classifier::new(ClassifierArch { image_channels: 1, image_side: side, width: 4, n_blocks: 2 }, &[0, 1], 3).unwrap()
}
