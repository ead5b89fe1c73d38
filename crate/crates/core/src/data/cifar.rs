use std::fs;
use std::path::Path;

use super::{split_validation, DatasetSplits, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// coarse label, fine label, 3×32×32 planar pixels
pub const CIFAR_RECORD_BYTES: usize = 2 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Parse a CIFAR-100 binary file. Ids start at `id_offset`.
pub fn read_cifar100(path: &Path, split: CifarSplit) -> Result<Vec<ImageRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id_offset = match split {
        CifarSplit::Train => 0,
        CifarSplit::Test => 50_000,
    };
    parse_cifar100(&bytes, id_offset)
}

pub(crate) fn parse_cifar100(bytes: &[u8], id_offset: u32) -> Result<Vec<ImageRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR_RECORD_BYTES;
        return Err(Error::Format {
            what: "CIFAR-100 file",
            offset: (whole * CIFAR_RECORD_BYTES) as u64,
            detail: format!(
                "{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size; trailing partial record",
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[1] as usize;
            if label >= 100 {
                return Err(Error::Format {
                    what: "CIFAR-100 file",
                    offset: (i * CIFAR_RECORD_BYTES + 1) as u64,
                    detail: format!("fine label {label} >= 100"),
                });
            }
            let pixels = rec[2..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(ImageRecord {
                pixels: Tensor::new(vec![3, 32, 32], pixels)?,
                label,
                id: id_offset + i as u32,
                mask: None,
            })
        })
        .collect()
}

/// Load `train.bin` and `test.bin` from a CIFAR-100 binary directory.
pub fn load_cifar100(dir: &Path) -> Result<DatasetSplits> {
    let train = read_cifar100(&dir.join("train.bin"), CifarSplit::Train)?;
    let test = read_cifar100(&dir.join("test.bin"), CifarSplit::Test)?;
    let (train, validation) = split_validation(train);
    Ok(DatasetSplits {
        train,
        validation,
        test,
        num_classes: 100,
        image_size: 32,
    })
}
