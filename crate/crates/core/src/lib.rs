//! Few-shot GAN data augmentation workbench.
//!
//! Pre-train a class-conditional GAN on many source classes, adapt it to a
//! handful of examples per target class, and measure whether its samples
//! help a fine-tuned classifier.

pub mod classifier;
pub mod container;
pub mod dataset;
mod error;
pub mod gan;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod store;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
