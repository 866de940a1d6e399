//! Samples, synthetic vessel trees, augmentation, dataset splits and the
//! on-disk formats.

mod augment;
pub mod io;
mod split;
mod synth;

pub use augment::{
    augment, random_augment, AugmentKind, AugmentOp, AugmentPolicy, AugmentProbabilities,
};
pub use split::{kfold, split, SplitPlan};
pub use synth::{generate, generate_dataset, sample_seed, SynthConfig};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(
                "image",
                format!("{height}x{width} with {} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }
}

/// One image with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub patient_id: String,
    pub view_tag: String,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: GrayImage,
        mask: BinaryMask,
        patient_id: impl Into<String>,
        view_tag: impl Into<String>,
    ) -> Result<Self> {
        if (image.height, image.width) != (mask.height(), mask.width()) {
            return Err(Error::dim(
                "sample",
                format!(
                    "image {}x{} vs mask {}x{}",
                    image.height,
                    image.width,
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
            patient_id: patient_id.into(),
            view_tag: view_tag.into(),
        })
    }
}

/// Stack images into a `[B, 1, H, W]` tensor.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor> {
    stack(samples, |s| s.image.data().to_vec())
}

/// Stack masks into a `[B, 1, H, W]` tensor of 0/1 values.
pub fn mask_batch(samples: &[&Sample]) -> Result<Tensor> {
    stack(samples, |s| s.mask.data().iter().map(|&v| v as f32).collect())
}

fn stack(samples: &[&Sample], f: impl Fn(&Sample) -> Vec<f32>) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("cannot batch zero samples".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::dim(
                "batch",
                format!(
                    "sample {} is {}x{}, expected {h}x{w}",
                    s.id, s.image.height, s.image.width
                ),
            ));
        }
        data.extend(f(s));
    }
    Tensor::new(&[samples.len(), 1, h, w], data)
}
