//! Conditional generator and projection discriminator.
//!
//! Both networks keep their parameters in a [`ParamStore`] whose groups are
//! what the fine-tuning masks act on:
//!
//! | network | `backbone` | `linear` | `embed` |
//! |---|---|---|---|
//! | generator | constant input, block convolutions, output projection | per-block modulation maps `M_b` | per-block class embeddings `E_b` |
//! | discriminator | convolutional feature extractor `f_D` | feature map `phi`, scalar head `psi` | label embedding `V`, latent head `d_z` |

mod discriminator;
mod generator;
mod mask;

use serde::{Deserialize, Serialize};

pub use discriminator::{DiscOutput, Discriminator};
pub use generator::Generator;
pub use mask::{expand_trainable_mask, DFinetuneMode, GFinetuneMode, TrainableMask};

use fsaug_autograd::Scalar;

use crate::error::{ensure, Result};
use crate::store::ParamStore;

pub(crate) const LEAK: f64 = 0.2;
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Shared shape configuration of the generator / discriminator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanArch {
    pub image_channels: usize,
    pub image_side: usize,
    pub latent_dim: usize,
    /// Width of the generator's per-block class embeddings.
    pub embed_dim: usize,
    pub g_width: usize,
    pub d_width: usize,
    /// Output width of the discriminator's feature map `phi`.
    pub feature_dim: usize,
    pub n_blocks: usize,
    /// Rows of every embedding matrix: source plus target classes.
    pub class_budget: usize,
}

impl GanArch {
    /// Three blocks `7 -> 14 -> 28` for 28x28 grayscale images.
    pub fn desk(class_budget: usize) -> Self {
        GanArch {
            image_channels: 1,
            image_side: 28,
            latent_dim: 128,
            embed_dim: 64,
            g_width: 64,
            d_width: 64,
            feature_dim: 128,
            n_blocks: 3,
            class_budget,
        }
    }

    /// Latent dim 4, 2 blocks, 8x8 images.
    pub fn tiny(class_budget: usize) -> Self {
        GanArch {
            image_channels: 1,
            image_side: 8,
            latent_dim: 4,
            embed_dim: 3,
            g_width: 4,
            d_width: 4,
            feature_dim: 5,
            n_blocks: 2,
            class_budget,
        }
    }

    /// Spatial side of the generator's constant input.
    pub fn base_side(&self) -> usize {
        self.image_side >> (self.n_blocks - 1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_blocks >= 1, Argument, "at least one block is required");
        ensure!(
            self.image_side % (1 << (self.n_blocks - 1)) == 0 && self.base_side() >= 1,
            Argument,
            "image side {} is not divisible by 2^{}",
            self.image_side,
            self.n_blocks - 1
        );
        ensure!(
            self.latent_dim > 0 && self.embed_dim > 0 && self.g_width > 0 && self.d_width > 0 && self.feature_dim > 0,
            Argument,
            "network widths must be positive"
        );
        ensure!(self.class_budget > 0, Argument, "class budget must be positive");
        Ok(())
    }
}

/// `ema <- decay * ema + (1 - decay) * params` for every tensor.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    ensure!((0.0..1.0).contains(&decay), Argument, "EMA decay must lie in [0, 1), got {decay}");
    ensure!(ema.signature() == params.signature(), Argument, "EMA and parameter stores differ in structure");
    let (d, keep) = (T::lit(decay), T::lit(1.0 - decay));
    for p in params.iter() {
        let target = ema.value_mut(&p.name);
        for (e, &v) in target.data_mut().iter_mut().zip(p.value.data()) {
            *e = d * *e + keep * v;
        }
    }
    Ok(())
}

/// Grows every class-embedding matrix of both networks by `n_new` rows
/// drawn from `N(0, 0.02^2)`; existing rows are untouched.
pub fn extend_embeddings<T: Scalar>(
    generator: &mut Generator<T>,
    discriminator: &mut Discriminator<T>,
    n_new: usize,
    init_seed: u64,
) {
    generator.extend_embeddings(n_new, init_seed);
    discriminator.extend_embeddings(n_new, init_seed);
}

pub(crate) fn grow_rows<T: Scalar>(store: &mut ParamStore<T>, name: &str, n_new: usize, init_seed: u64) {
    if n_new == 0 {
        return;
    }
    let old = store.get(name).clone();
    let (rows, cols) = (old.dim(0), old.dim(1));
    let fresh = crate::rng::normal_vec(&mut crate::rng::substream(init_seed, &format!("extend/{name}")), n_new * cols, 0.02);
    let mut data = old.into_data();
    data.extend(fresh.into_iter().map(T::lit));
    let t = fsaug_autograd::Tensor::new(&[rows + n_new, cols], data);
    *store.value_mut(name) = t;
}
