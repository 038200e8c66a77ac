//! IDX (MNIST-style) files: a big-endian magic number, big-endian `u32`
//! dimension sizes, then raw unsigned bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, LabeledImage, TEST_ID_OFFSET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an images file into `(rows, cols, pixels)` with one `Vec<u8>` per image.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let images = bytes[16..expected].chunks(size.max(1)).take(count).map(<[u8]>::to_vec).collect();
    Ok((rows, cols, images))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads paired image and label files. Pixels are scaled to `[0, 1]`;
/// sample ids start at `id_offset`.
pub fn load_idx_with_offset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    id_offset: u64,
) -> Result<Vec<LabeledImage>> {
    let (rows, cols, images) = parse_images(&fs::read(images_path)?)?;
    let labels = parse_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    images
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (px, label))| {
            let data = px.into_iter().map(|b| f64::from(b) / 255.0).collect();
            Ok(LabeledImage {
                id: id_offset + i as u64,
                image: Tensor::new(vec![rows, cols, 1], data)?,
                label: label as usize,
            })
        })
        .collect()
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Vec<LabeledImage>> {
    load_idx_with_offset(images_path, labels_path, 0)
}

/// Train and test splits from four IDX files.
pub fn load_idx_dataset(
    train_images: impl AsRef<Path>,
    train_labels: impl AsRef<Path>,
    test_images: impl AsRef<Path>,
    test_labels: impl AsRef<Path>,
) -> Result<Dataset> {
    let train = load_idx(train_images, train_labels)?;
    let test = load_idx_with_offset(test_images, test_labels, TEST_ID_OFFSET)?;
    let num_classes = train
        .iter()
        .chain(&test)
        .map(|s| s.label + 1)
        .max()
        .ok_or(Error::EmptyDataset)?;
    Ok(Dataset {
        num_classes,
        train,
        test,
    })
}

/// Encodes single-channel images, quantizing each pixel to `round(255 v)`.
pub fn encode_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first().map(Tensor::shape) {
        Some(&[r, c, 1]) => (r, c),
        Some(s) => {
            return Err(Error::Shape {
                op: "idx",
                detail: format!("expected [rows, cols, 1], got {s:?}"),
            })
        }
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.shape() != [rows, cols, 1] {
            return Err(Error::Shape {
                op: "idx",
                detail: format!("mixed image shapes {:?} and {:?}", [rows, cols, 1], img.shape()),
            });
        }
        out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    samples: &[LabeledImage],
) -> Result<()> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples
        .iter()
        .map(|s| u8::try_from(s.label).map_err(|_| Error::LabelOutOfRange { label: s.label, classes: 256 }))
        .collect::<Result<Vec<u8>>>()?;
    fs::File::create(images_path)?.write_all(&encode_images(&images)?)?;
    fs::File::create(labels_path)?.write_all(&encode_labels(&labels))?;
    Ok(())
}
