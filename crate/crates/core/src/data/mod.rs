//! Datasets, augmentation and the saccade-target dataset.

mod augment;
mod cifar;
mod saccade_file;
mod shapes;
mod targets;

pub use augment::{hflip, hflip_forced, random_resized_crop, CropParams};
pub use cifar::{load_cifar100, read_cifar100, CifarSplit, CIFAR_RECORD_BYTES};
pub use saccade_file::{
    decode_saccade_records, encode_saccade_records, read_saccade_file, write_saccade_file, SaccadeFile,
    SACCADE_HEADER_BYTES,
};
pub use shapes::{gen_shapes, shapes_splits, ShapeKind, SHAPE_CLASSES};
pub use targets::{build_saccade_targets, mask_overlap, SaccadeRecord};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled `3×H×W` image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub id: u32,
    /// Row-major `H×W` object occupancy, when the generator knows it.
    pub mask: Option<Vec<bool>>,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Train / validation / test partitions of one dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<ImageRecord>,
    pub validation: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl DatasetSplits {
    pub fn all(&self) -> impl Iterator<Item = &ImageRecord> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn check_image_size(&self, expected: usize) -> Result<()> {
        if self.image_size != expected {
            return Err(Error::Config(format!(
                "dataset images are {}px but the model expects {expected}px",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Every tenth id goes to validation; the split never depends on file order.
pub fn is_validation_id(id: u32) -> bool {
    id.is_multiple_of(10)
}

pub(crate) fn split_validation(records: Vec<ImageRecord>) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    records.into_iter().partition(|r| !is_validation_id(r.id))
}
