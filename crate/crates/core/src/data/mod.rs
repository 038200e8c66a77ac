//! Datasets, ingestion, corruptions and task streams.

pub mod corruption;
pub mod idx;
pub mod stream;
pub mod synth;

use crate::tensor::Tensor;

/// One image `[H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// Unique within its dataset; keys per-sample randomness.
    pub id: u64,
    pub image: Tensor,
    pub label: usize,
}

/// Offset added to test-sample ids so they never collide with training ids.
pub const TEST_ID_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    /// `[H, W, C]` of the first image.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.train
            .first()
            .or(self.test.first())
            .map(|s| s.image.shape())
    }
}
