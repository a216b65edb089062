use fsaug_autograd::{Graph, Scalar, Tensor, Var};

use super::{grow_rows, GanArch, LEAK};
use crate::error::{ensure, Error, Result};
use crate::store::{Bound, Group, ParamStore};

/// Projection discriminator.
///
/// `h = f_D(x)`; the conditional logit is `V[y] . phi(h) + psi(phi(h))`,
/// the unconditional logit is `psi(phi(h))` alone, and the latent head
/// `d_z(phi(h))` predicts the code that generated `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub arch: GanArch,
    pub params: ParamStore<T>,
}

/// Outputs of one discriminator pass.
pub struct DiscOutput<'g, T: Scalar> {
    /// `[B]`; present when labels were given.
    pub conditional: Option<Var<'g, T>>,
    /// `[B]`
    pub unconditional: Var<'g, T>,
    /// `[B, latent_dim]`
    pub z_prediction: Var<'g, T>,
}

fn block(b: usize, part: &str) -> String {
    format!("d.block{b}.{part}")
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (c, f) = (arch.d_width, arch.feature_dim);
        let conv_std = (2.0 / (9.0 * c as f64)).sqrt();
        let mut p = ParamStore::new();
        p.insert_normal("d.stem.w", Group::Backbone, &[c, arch.image_channels, 3, 3], (2.0 / (9.0 * arch.image_channels as f64)).sqrt(), seed);
        p.insert_zeros("d.stem.b", Group::Backbone, &[c]);
        for b in 0..arch.n_blocks {
            p.insert_normal(&block(b, "conv1.w"), Group::Backbone, &[c, c, 3, 3], conv_std, seed);
            p.insert_zeros(&block(b, "conv1.b"), Group::Backbone, &[c]);
            p.insert_normal(&block(b, "conv2.w"), Group::Backbone, &[c, c, 3, 3], 0.5 * conv_std, seed);
            p.insert_zeros(&block(b, "conv2.b"), Group::Backbone, &[c]);
        }
        p.insert_normal("d.phi.w", Group::Linear, &[c, f], (1.0 / c as f64).sqrt(), seed);
        p.insert_zeros("d.phi.b", Group::Linear, &[f]);
        p.insert_normal("d.psi.w", Group::Linear, &[f, 1], (1.0 / f as f64).sqrt(), seed);
        p.insert_zeros("d.psi.b", Group::Linear, &[1]);
        p.insert_normal("d.embed", Group::Embed, &[arch.class_budget, f], (1.0 / f as f64).sqrt(), seed);
        p.insert_normal("d.zhead.w", Group::Embed, &[f, arch.latent_dim], (1.0 / f as f64).sqrt(), seed);
        p.insert_zeros("d.zhead.b", Group::Embed, &[arch.latent_dim]);
        Ok(Discriminator { arch, params: p })
    }

    pub fn class_budget(&self) -> usize {
        self.params.get("d.embed").dim(0)
    }

    /// Backbone features `h = f_D(x)`, `[B, d_width]`.
    pub fn backbone<'g>(&self, bound: &Bound<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = &self.arch;
        let expect = [a.image_channels, a.image_side, a.image_side];
        let shape = x.shape();
        ensure!(shape.len() == 4 && shape[1..] == expect, Argument, "discriminator input must be [B, {expect:?}], got {shape:?}");
        let leak = T::lit(LEAK);
        let mut h = x.conv2d(bound.var("d.stem.w")).add_channel_bias(bound.var("d.stem.b"));
        for b in 0..a.n_blocks {
            let r = h
                .leaky_relu(leak)
                .conv2d(bound.var(&block(b, "conv1.w")))
                .add_channel_bias(bound.var(&block(b, "conv1.b")))
                .leaky_relu(leak)
                .conv2d(bound.var(&block(b, "conv2.w")))
                .add_channel_bias(bound.var(&block(b, "conv2.b")));
            h = h + r;
            if b + 1 < a.n_blocks {
                h = h.avg_pool2x();
            }
        }
        Ok(h.leaky_relu(leak).mean_spatial())
    }

    /// Projection head applied to backbone features.
    pub fn head<'g>(&self, bound: &Bound<'g, '_, T>, h: Var<'g, T>, y: Option<&[usize]>) -> Result<DiscOutput<'g, T>> {
        let batch = h.shape()[0];
        let phi = h.matmul(bound.var("d.phi.w")).add_bias(bound.var("d.phi.b"));
        self.project(bound, phi, y).map(|out| {
            debug_assert_eq!(out.unconditional.shape(), [batch]);
            out
        })
    }

    /// Logits from given `phi(h)` features, `[B, feature_dim]`.
    pub fn project<'g>(&self, bound: &Bound<'g, '_, T>, phi: Var<'g, T>, y: Option<&[usize]>) -> Result<DiscOutput<'g, T>> {
        let batch = phi.shape()[0];
        let unconditional = phi.matmul(bound.var("d.psi.w")).add_bias(bound.var("d.psi.b")).reshape(&[batch]);
        let z_prediction = phi.matmul(bound.var("d.zhead.w")).add_bias(bound.var("d.zhead.b"));
        let conditional = match y {
            None => None,
            Some(y) => {
                ensure!(y.len() == batch, Argument, "{} labels for a batch of {batch}", y.len());
                let budget = self.class_budget();
                if let Some(&bad) = y.iter().find(|&&c| c >= budget) {
                    return Err(Error::Index(format!("class {bad} is outside the embedding budget of {budget}")));
                }
                let proj = bound.var("d.embed").gather_rows(y).mul(phi).sum_cols();
                Some(proj + unconditional)
            }
        };
        Ok(DiscOutput { conditional, unconditional, z_prediction })
    }

    pub fn forward<'g>(&self, bound: &Bound<'g, '_, T>, x: Var<'g, T>, y: Option<&[usize]>) -> Result<DiscOutput<'g, T>> {
        let h = self.backbone(bound, x)?;
        self.head(bound, h, y)
    }

    /// `(conditional, unconditional, z_prediction)` values without gradients.
    pub fn evaluate(&self, x: &Tensor<T>, y: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let g = Graph::new();
        let bound = self.params.bind_constant(&g);
        let out = self.forward(&bound, g.constant(x.clone()), Some(y))?;
        let cond = out.conditional.expect("labels given").value();
        Ok((cond.as_ref().clone(), out.unconditional.value().as_ref().clone(), out.z_prediction.value().as_ref().clone()))
    }

    pub fn extend_embeddings(&mut self, n_new: usize, init_seed: u64) {
        grow_rows(&mut self.params, "d.embed", n_new, init_seed);
        self.arch.class_budget += n_new;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};

    fn images(batch: usize, seed: u64) -> Tensor<f64> {
        let v = normal_vec(&mut stream(seed), batch * 64, 0.5).into_iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        Tensor::new(&[batch, 1, 8, 8], v)
    }

    #[test]
    fn zero_embedding_makes_logits_label_free() {
        let mut d = Discriminator::<f64>::new(GanArch::tiny(3), 0).unwrap();
        d.params.set("d.embed", Tensor::zeros(&[3, 5])).unwrap();
        let x = images(3, 1);
        for y in [[0, 1, 2], [2, 2, 0]] {
            let (cond, uncond, _) = d.evaluate(&x, &y).unwrap();
            assert_eq!(cond, uncond);
        }
    }

    #[test]
    fn hand_set_projection() {
        let mut arch = GanArch::tiny(3);
        arch.feature_dim = 4;
        let mut d = Discriminator::<f64>::new(arch, 0).unwrap();
        let v = vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.5, 2.0, 1.5, 0.7, -0.3, 1.1, 2.5];
        d.params.set("d.embed", Tensor::new(&[3, 4], v.clone())).unwrap();
        d.params.set("d.psi.w", Tensor::zeros(&[4, 1])).unwrap();
        d.params.set("d.psi.b", Tensor::new(&[1], vec![0.5])).unwrap();
        let g = Graph::new();
        let bound = d.params.bind_constant(&g);
        let phi = g.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 2.0, -1.0]));
        let out = d.project(&bound, phi, Some(&[2])).unwrap();
        let expected = 0.7 * 1.0 + -0.3 * 0.0 + 1.1 * 2.0 + 2.5 * -1.0 + 0.5;
        assert!((out.conditional.unwrap().value().item() - expected).abs() < 1e-15);
        assert_eq!(out.unconditional.value().item(), 0.5);
    }

    #[test]
    fn identical_rows_identical_logits() {
        let mut d = Discriminator::<f64>::new(GanArch::tiny(3), 2).unwrap();
        let mut v = d.params.get("d.embed").clone();
        let row0: Vec<f64> = v.data()[..5].to_vec();
        v.data_mut()[5..10].copy_from_slice(&row0);
        d.params.set("d.embed", v).unwrap();
        let x = images(1, 3);
        assert_eq!(d.evaluate(&x, &[0]).unwrap().0, d.evaluate(&x, &[1]).unwrap().0);
    }

    #[test]
    fn projection_identity_on_random_inputs() {
        let d = Discriminator::<f64>::new(GanArch::tiny(4), 7).unwrap();
        for seed in 0..5 {
            let x = images(4, seed);
            let y = [0, 3, 1, 2];
            let (cond, uncond, zp) = d.evaluate(&x, &y).unwrap();
            assert_eq!(zp.shape(), &[4, 4]);
            let g = Graph::new();
            let bound = d.params.bind_constant(&g);
            let h = d.backbone(&bound, g.constant(x)).unwrap();
            let phi = h.matmul(bound.var("d.phi.w")).add_bias(bound.var("d.phi.b")).value();
            let v = d.params.get("d.embed");
            for i in 0..4 {
                let dot: f64 = (0..5).map(|j| v.data()[y[i] * 5 + j] * phi.data()[i * 5 + j]).sum();
                assert!((cond.data()[i] - uncond.data()[i] - dot).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_argument_error() {
        let d = Discriminator::<f64>::new(GanArch::tiny(3), 0).unwrap();
        let err = d.evaluate(&Tensor::zeros(&[1, 1, 6, 6]), &[0]).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        let err = d.evaluate(&images(1, 0), &[5]).unwrap_err();
        assert!(matches!(err, Error::Index(_)));
    }

    #[test]
    fn extension_keeps_rows() {
        let mut d = Discriminator::<f32>::new(GanArch::tiny(38), 3).unwrap();
        let old = d.params.get("d.embed").clone();
        d.extend_embeddings(9, 5);
        let new = d.params.get("d.embed");
        assert_eq!(new.shape(), &[47, 5]);
        assert_eq!(&new.data()[..old.len()], old.data());
        let fresh = &new.data()[old.len()..];
        let sd = (fresh.iter().map(|v| (v * v) as f64).sum::<f64>() / fresh.len() as f64).sqrt();
        assert!(sd < 0.05, "new rows should be small, sd {sd}");
    }
}
