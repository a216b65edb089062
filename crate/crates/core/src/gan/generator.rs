use fsaug_autograd::{Graph, Scalar, Tensor, Var};

use super::{grow_rows, GanArch, LEAK, NORM_EPS};
use crate::error::{ensure, Result};
use crate::store::{Bound, Group, ParamStore};

/// Conditional generator `G(z, y)`.
///
/// A learnable constant tensor is refined by residual blocks (2x
/// nearest-neighbour upsampling before every block but the first). Inside a
/// block the features are instance-normalized and then scaled and shifted
/// per channel by `M_b(concat(z, E_b[y]))`; the image is produced by a final
/// convolution and `tanh`, so pixels lie in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub arch: GanArch,
    pub params: ParamStore<T>,
}

fn block(b: usize, part: &str) -> String {
    format!("g.block{b}.{part}")
}

impl<T: Scalar> Generator<T> {
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (c, s, r) = (arch.g_width, arch.base_side(), arch.class_budget);
        let conv_std = (2.0 / (9.0 * c as f64)).sqrt();
        let mod_in = arch.latent_dim + arch.embed_dim;
        let mut p = ParamStore::new();
        p.insert_normal("g.h0", Group::Backbone, &[c, s, s], 1.0, seed);
        for b in 0..arch.n_blocks {
            p.insert_normal(&block(b, "conv1.w"), Group::Backbone, &[c, c, 3, 3], conv_std, seed);
            p.insert_zeros(&block(b, "conv1.b"), Group::Backbone, &[c]);
            p.insert_normal(&block(b, "conv2.w"), Group::Backbone, &[c, c, 3, 3], 0.5 * conv_std, seed);
            p.insert_zeros(&block(b, "conv2.b"), Group::Backbone, &[c]);
            p.insert_normal(&block(b, "embed"), Group::Embed, &[r, arch.embed_dim], 1.0, seed);
            p.insert_normal(&block(b, "mod.w"), Group::Linear, &[mod_in, 2 * c], (1.0 / mod_in as f64).sqrt(), seed);
            p.insert_zeros(&block(b, "mod.b"), Group::Linear, &[2 * c]);
        }
        let out_std = (2.0 / (9.0 * c as f64)).sqrt();
        p.insert_normal("g.out.w", Group::Backbone, &[arch.image_channels, c, 3, 3], out_std, seed);
        p.insert_zeros("g.out.b", Group::Backbone, &[arch.image_channels]);
        Ok(Generator { arch, params: p })
    }

    /// Rows of the class-embedding matrices.
    pub fn class_budget(&self) -> usize {
        self.params.get(&block(0, "embed")).dim(0)
    }

    pub fn embedding_names(&self) -> Vec<String> {
        (0..self.arch.n_blocks).map(|b| block(b, "embed")).collect()
    }

    pub fn forward<'g>(&self, bound: &Bound<'g, '_, T>, z: Var<'g, T>, y: &[usize]) -> Result<Var<'g, T>> {
        self.forward_impl(bound, z, y, true)
    }

    fn forward_impl<'g>(&self, bound: &Bound<'g, '_, T>, z: Var<'g, T>, y: &[usize], modulated: bool) -> Result<Var<'g, T>> {
        let batch = y.len();
        let budget = self.class_budget();
        ensure!(z.shape() == [batch, self.arch.latent_dim], Argument, "z must be [{batch}, {}], got {:?}", self.arch.latent_dim, z.shape());
        if let Some(&bad) = y.iter().find(|&&c| c >= budget) {
            return Err(crate::Error::Index(format!("class {bad} is outside the embedding budget of {budget}")));
        }
        ensure!(z.value().all_finite(), Numerical, "latent codes must be finite");
        let c = self.arch.g_width;
        let leak = T::lit(LEAK);
        let eps = T::lit(NORM_EPS);
        let mut x = bound.var("g.h0").broadcast_batch(batch);
        for b in 0..self.arch.n_blocks {
            if b > 0 {
                x = x.upsample2x();
            }
            let mut a = x.leaky_relu(leak).conv2d(bound.var(&block(b, "conv1.w"))).add_channel_bias(bound.var(&block(b, "conv1.b")));
            a = a.instance_norm(eps);
            if modulated {
                let code = z.concat_cols(bound.var(&block(b, "embed")).gather_rows(y));
                let m = code.matmul(bound.var(&block(b, "mod.w"))).add_bias(bound.var(&block(b, "mod.b")));
                let scale = m.slice_cols(0, c).add_scalar(T::one());
                let shift = m.slice_cols(c, c);
                a = a.modulate(scale, shift);
            }
            a = a.leaky_relu(leak).conv2d(bound.var(&block(b, "conv2.w"))).add_channel_bias(bound.var(&block(b, "conv2.b")));
            x = x + a;
        }
        Ok(x.leaky_relu(leak).conv2d(bound.var("g.out.w")).add_channel_bias(bound.var("g.out.b")).tanh())
    }

    /// Images for `(z, y)` without recording gradients; `z` is `[B, latent_dim]`.
    pub fn generate(&self, z: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = self.params.bind_constant(&g);
        let zv = g.constant(z.clone());
        let out = self.forward(&bound, zv, y)?;
        Ok(out.value().as_ref().clone())
    }

    pub fn extend_embeddings(&mut self, n_new: usize, init_seed: u64) {
        for name in self.embedding_names() {
            grow_rows(&mut self.params, &name, n_new, init_seed);
        }
        self.arch.class_budget += n_new;
    }
}
