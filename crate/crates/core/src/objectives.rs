//! Adversarial, latent-reconstruction and mixup objectives.
//!
//! The plain functions evaluate losses on logit slices; the [`graph`]
//! module builds the same expressions on the autodiff tape for training.
//! Both reduce with `sum * (1 / n)` so they agree bit-for-bit.

use fsaug_autograd::{softplus, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

fn mean_softplus<T: Scalar>(logits: &[T], sign: T) -> T {
    let s: T = logits.iter().map(|&v| softplus(sign * v)).sum();
    s * (T::one() / T::lit(logits.len() as f64))
}

fn check_logits<T: Scalar>(logits: &[T], what: &str) -> Result<()> {
    ensure!(!logits.is_empty(), Argument, "{what} batch is empty");
    ensure!(logits.iter().all(|v| v.is_finite()), Numerical, "{what} logits are not finite");
    Ok(())
}

/// `mean softplus(-real) + mean softplus(fake)`, i.e. `-log D(x) - log(1 - D(G(z)))`.
pub fn d_loss_supervised<T: Scalar>(real_logits: &[T], fake_logits: &[T]) -> Result<T> {
    check_logits(real_logits, "real")?;
    check_logits(fake_logits, "fake")?;
    Ok(mean_softplus(real_logits, -T::one()) + mean_softplus(fake_logits, T::one()))
}

/// Non-saturating generator loss `mean softplus(-fake)`.
pub fn g_loss_supervised<T: Scalar>(fake_logits: &[T]) -> Result<T> {
    check_logits(fake_logits, "fake")?;
    Ok(mean_softplus(fake_logits, -T::one()))
}

/// Mean over batch and latent dimensions of `(z_pred - z)^2`.
pub fn infogan_loss<T: Scalar>(z_pred: &Tensor<T>, z: &Tensor<T>) -> Result<T> {
    ensure!(z_pred.shape() == z.shape(), Argument, "z prediction {:?} vs code {:?}", z_pred.shape(), z.shape());
    ensure!(!z.is_empty(), Argument, "empty latent batch");
    let s: T = z_pred.data().iter().zip(z.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s * (T::one() / T::lit(z.len() as f64)))
}

fn check_alpha(alpha: f64) -> Result<()> {
    ensure!(alpha >= 0.0 && alpha.is_finite(), Argument, "alpha must be a non-negative number, got {alpha}");
    Ok(())
}

/// Supervised discriminator loss plus `alpha` times the same loss on the
/// unconditional head, with real unconditional logits taken from unlabeled data.
pub fn d_loss_semi<T: Scalar>(
    real_cond: &[T],
    fake_cond: &[T],
    real_uncond_unlabeled: &[T],
    fake_uncond: &[T],
    alpha: f64,
) -> Result<T> {
    check_alpha(alpha)?;
    let sup = d_loss_supervised(real_cond, fake_cond)?;
    let unsup = d_loss_supervised(real_uncond_unlabeled, fake_uncond)?;
    Ok(sup + T::lit(alpha) * unsup)
}

/// Generator must fool both the conditional and the unconditional branch.
pub fn g_loss_semi<T: Scalar>(fake_cond: &[T], fake_uncond: &[T], alpha: f64) -> Result<T> {
    check_alpha(alpha)?;
    Ok(g_loss_supervised(fake_cond)? + T::lit(alpha) * g_loss_supervised(fake_uncond)?)
}

/// Every term of one training step, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub d_real: f64,
    pub d_fake: f64,
    pub g_adv: f64,
    pub info: f64,
    pub d_unsup_real: f64,
    pub d_unsup_fake: f64,
    pub g_unsup: f64,
    /// `d_real + d_fake + alpha (d_unsup_real + d_unsup_fake) + gamma info`
    pub total_d: f64,
    /// `g_adv + alpha g_unsup + gamma info`
    pub total_g: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.d_real, self.d_fake, self.g_adv, self.info, self.d_unsup_real, self.d_unsup_fake, self.g_unsup, self.total_d, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss expressions on the autodiff tape.
pub mod graph {
    use fsaug_autograd::{Scalar, Var};

    /// `mean softplus(-real)`
    pub fn real_term<'g, T: Scalar>(real: Var<'g, T>) -> Var<'g, T> {
        real.neg().softplus().mean()
    }

    /// `mean softplus(fake)`
    pub fn fake_term<'g, T: Scalar>(fake: Var<'g, T>) -> Var<'g, T> {
        fake.softplus().mean()
    }

    pub fn d_loss_supervised<'g, T: Scalar>(real: Var<'g, T>, fake: Var<'g, T>) -> Var<'g, T> {
        real_term(real) + fake_term(fake)
    }

    pub fn g_loss_supervised<'g, T: Scalar>(fake: Var<'g, T>) -> Var<'g, T> {
        real_term(fake)
    }

    pub fn infogan_loss<'g, T: Scalar>(z_pred: Var<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        (z_pred - z).square().mean()
    }
}

/// One mixed minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupBatch {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub lambdas: Vec<f64>,
    pub permutation: Vec<usize>,
}

/// Input mixup: `x[i] <- l_i x[i] + (1 - l_i) x[perm(i)]`, labels alike,
/// with a random permutation and `l_i ~ Beta(beta, beta)`.
pub fn mixup_batch<R: Rng + ?Sized>(x: &Tensor<f32>, y_onehot: &Tensor<f32>, beta_param: f64, rng: &mut R) -> Result<MixupBatch> {
    ensure!(beta_param > 0.0 && beta_param.is_finite(), Argument, "mixup beta must be positive, got {beta_param}");
    let batch = x.shape().first().copied().unwrap_or(0);
    ensure!(batch >= 2, Argument, "mixup needs a batch of at least 2");
    let mut permutation: Vec<usize> = (0..batch).collect();
    permutation.shuffle(rng);
    let dist = Beta::new(beta_param, beta_param).map_err(|e| Error::Argument(e.to_string()))?;
    let lambdas: Vec<f64> = (0..batch).map(|_| dist.sample(rng)).collect();
    mix_with(x, y_onehot, lambdas, permutation)
}

/// Mixup with given coefficients and pairing.
pub fn mix_with(x: &Tensor<f32>, y_onehot: &Tensor<f32>, lambdas: Vec<f64>, permutation: Vec<usize>) -> Result<MixupBatch> {
    let batch = x.shape()[0];
    ensure!(y_onehot.shape()[0] == batch, Argument, "label batch {} vs image batch {batch}", y_onehot.shape()[0]);
    ensure!(lambdas.len() == batch && permutation.len() == batch, Argument, "one lambda and partner per example");
    ensure!(permutation.iter().all(|&p| p < batch), Index, "permutation entry out of range");
    let mix = |t: &Tensor<f32>| {
        let n = t.len() / batch;
        let mut out = t.clone();
        for (i, (&l, &p)) in lambdas.iter().zip(&permutation).enumerate() {
            let l = l as f32;
            for j in 0..n {
                out.data_mut()[i * n + j] = l * t.data()[i * n + j] + (1.0 - l) * t.data()[p * n + j];
            }
        }
        out
    };
    Ok(MixupBatch { x: mix(x), y: mix(y_onehot), lambdas, permutation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_logits() {
        let ln2 = std::f64::consts::LN_2;
        assert!((d_loss_supervised(&[0.0; 4], &[0.0; 3]).unwrap() - 2.0 * ln2).abs() < 1e-15);
        assert!((g_loss_supervised(&[0.0; 5]).unwrap() - ln2).abs() < 1e-15);
        assert!((d_loss_semi(&[0.0], &[0.0], &[0.0; 2], &[0.0], 1.0).unwrap() - 4.0 * ln2).abs() < 1e-15);
        assert!((g_loss_semi(&[0.0], &[0.0; 3], 1.0).unwrap() - 2.0 * ln2).abs() < 1e-15);
        assert!((1.386294 - 2.0 * ln2).abs() < 1e-6);
    }

    #[test]
    fn saturation() {
        assert!(d_loss_supervised(&[100.0], &[-100.0]).unwrap() < 1e-20);
        assert!(g_loss_supervised(&[100.0f64]).unwrap() < 1e-20);
        // no overflow far beyond |logit| = 30
        assert!(d_loss_supervised(&[-1e4f32], &[1e4]).unwrap().is_finite());
    }

    #[test]
    fn semi_reduces_to_supervised() {
        let r = [0.3f64, -1.2, 4.0];
        let f = [0.1f64, 2.0];
        assert_eq!(d_loss_semi(&r, &f, &[9.0], &[-3.0], 0.0).unwrap().to_bits(), d_loss_supervised(&r, &f).unwrap().to_bits());
        assert_eq!(g_loss_semi(&f, &r, 0.0).unwrap().to_bits(), g_loss_supervised(&f).unwrap().to_bits());
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(d_loss_supervised::<f64>(&[], &[1.0]), Err(Error::Argument(_))));
        assert!(matches!(g_loss_supervised::<f64>(&[]), Err(Error::Argument(_))));
        assert!(matches!(d_loss_semi(&[1.0], &[1.0], &[1.0], &[1.0], -0.1), Err(Error::Argument(_))));
        assert!(matches!(g_loss_semi(&[1.0], &[1.0], -1.0), Err(Error::Argument(_))));
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(infogan_loss(&a, &Tensor::zeros(&[3, 2])), Err(Error::Argument(_))));
    }

    #[test]
    fn infogan_mean_convention() {
        let z = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.0]);
        assert_eq!(infogan_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(infogan_loss(&z.map(|v| v + 1.0), &z).unwrap(), 1.0);
    }

    #[test]
    fn mixup_forced_lambdas() {
        let x = Tensor::new(&[2, 3], vec![0.0, 0.2, 1.0, 1.0, 0.4, 0.0]);
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let same = mix_with(&x, &y, vec![1.0, 1.0], vec![1, 0]).unwrap();
        assert_eq!((same.x.clone(), same.y.clone()), (x.clone(), y.clone()));
        let half = mix_with(&x, &y, vec![0.5, 0.5], vec![1, 0]).unwrap();
        let mean = [0.5f32, 0.3, 0.5];
        for (a, b) in half.x.data().chunks(3).flat_map(|r| r.iter()).zip(mean.iter().cycle()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(half.y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn mixup_self_consistency() {
        let mut rng = stream(4);
        let x = Tensor::from_fn(&[6, 1, 2, 2], |i| ((i * 7) % 11) as f32 / 10.0);
        let y = Tensor::from_fn(&[6, 3], |i| if i % 3 == (i / 3) % 3 { 1.0 } else { 0.0 });
        let m = mixup_batch(&x, &y, 0.2, &mut rng).unwrap();
        let mut sorted = m.permutation.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        for i in 0..6 {
            let (l, p) = (m.lambdas[i] as f32, m.permutation[i]);
            assert!((0.0..=1.0).contains(&m.lambdas[i]));
            for j in 0..4 {
                let (a, b) = (x.data()[i * 4 + j], x.data()[p * 4 + j]);
                assert_eq!(m.x.data()[i * 4 + j], l * a + (1.0 - l) * b);
                assert!(m.x.data()[i * 4 + j] >= a.min(b) - 1e-7 && m.x.data()[i * 4 + j] <= a.max(b) + 1e-7);
            }
        }
    }

    #[test]
    fn mixup_errors() {
        let x = Tensor::<f32>::zeros(&[2, 1]);
        let y = Tensor::<f32>::zeros(&[2, 2]);
        assert!(mixup_batch(&x, &y, 0.0, &mut stream(0)).is_err());
        assert!(mixup_batch(&Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 2]), 0.5, &mut stream(0)).is_err());
    }
}
