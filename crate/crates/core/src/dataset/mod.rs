//! Image datasets, class-wise splits, support sampling and augmentation.
//!
//! Pixels are stored as `f32` in `[0, 1]`, channel-major per image.

mod augment;
mod idx;
mod image_dir;
mod split;
mod synthetic;

use fsaug_autograd::Tensor;
use serde::{Deserialize, Serialize};

pub use augment::{apply_augmentation, augment_image, AugmentParams, AugmentationSpec};
pub use idx::{load_idx_dataset, parse_idx_dataset};
pub use image_dir::{load_image_directory, write_image_directory};
pub use split::{sample_support, split_classes, ClassPartition, SupportSet};
pub use synthetic::make_synthetic;

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape { channels, height, width }
    }

    /// Single-channel square image.
    pub fn gray(side: usize) -> Self {
        Self::new(1, side, side)
    }

    /// Number of values per image.
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// An immutable labelled image collection with a per-class index.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    shape: ImageShape,
    class_count: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates the invariants and builds the class index.
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        class_count: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        ensure!(
            pixels.len() == labels.len() * shape.numel(),
            Consistency,
            "{} pixel values do not make {} images of shape {:?}",
            pixels.len(),
            labels.len(),
            shape
        );
        let mut class_index = vec![Vec::new(); class_count];
        for (i, &y) in labels.iter().enumerate() {
            ensure!(y < class_count, Consistency, "label {y} of example {i} exceeds class count {class_count}");
            class_index[y].push(i);
        }
        ensure!(
            pixels.iter().all(|v| (0.0..=1.0).contains(v)),
            Consistency,
            "pixel values must lie in [0, 1]"
        );
        Ok(Dataset { name: name.into(), shape, class_count, pixels, labels, class_index })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Example indices of class `c`, in ascending order.
    pub fn class_indices(&self, c: usize) -> &[usize] {
        &self.class_index[c]
    }

    pub fn gather(&self, indices: &[usize]) -> LabeledImages {
        let mut pixels = Vec::with_capacity(indices.len() * self.shape.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledImages { shape: self.shape, pixels, labels }
    }

    /// Keeps the first `cap` examples of every class.
    pub fn cap_per_class(&self, cap: usize) -> Dataset {
        let keep: Vec<usize> = {
            let mut keep: Vec<usize> = self.class_index.iter().flat_map(|idx| idx.iter().take(cap).copied()).collect();
            keep.sort_unstable();
            keep
        };
        let subset = self.gather(&keep);
        Dataset::new(self.name.clone(), self.shape, self.class_count, subset.pixels, subset.labels)
            .expect("subset of a valid dataset is valid")
    }
}

/// A flat labelled image set (support sets, augmented sets, evaluation splits).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn empty(shape: ImageShape) -> Self {
        LabeledImages { shape, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        assert_eq!(image.len(), self.shape.numel(), "image size mismatch");
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &LabeledImages) {
        assert_eq!(self.shape, other.shape, "image shape mismatch");
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn select(&self, indices: &[usize]) -> LabeledImages {
        let mut out = LabeledImages::empty(self.shape);
        for &i in indices {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    /// `[B, C, H, W]` tensor of the selected images, pixel range unchanged.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[indices.len(), self.shape.channels, self.shape.height, self.shape.width], data)
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Maps `[0, 1]` pixels to the generator range `[-1, 1]`.
pub fn to_signed(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v * 2.0 - 1.0)
}

/// Maps generator output in `[-1, 1]` back to `[0, 1]`.
pub fn to_unit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}
