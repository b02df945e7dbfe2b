//! Binary dataset formats.
//!
//! IDX: big-endian `u32` magic (`0x00000803` for `u8` images of rank 3,
//! `0x00000801` for `u8` labels of rank 1), one big-endian `u32` per
//! dimension, then the payload row-major.
//!
//! CIFAR-10 binary: fixed 3073-byte records, one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32x32.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io_at(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        expected: (at + 4) as u64,
        actual: bytes.len() as u64,
    })?;
    Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

/// Parses an IDX header with the given magic; returns dims and payload.
fn idx_payload<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an IDX image/label pair as `[N, 1, H, W]` pixels scaled by 1/255.
///
/// The class count is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let (dims, pixels) = idx_payload(&image_bytes, IDX_IMAGES, images_path)?;
    let (ldims, labels) = idx_payload(&label_bytes, IDX_LABELS, labels_path)?;
    if dims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    if dims[0] == 0 {
        return Err(Error::Empty(images_path.display().to_string()));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let data = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    let images = Tensor::new(&[dims[0], 1, dims[1], dims[2]], data)?;
    Dataset::new(images, labels, classes, Split::Train)
}

/// Loads and concatenates CIFAR-10 binary batch files in the given order.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read(path)?;
        if bytes.is_empty() {
            return Err(Error::Empty(path.display().to_string()));
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::BadRecordLength {
                path: path.to_path_buf(),
                len: bytes.len() as u64,
                record: CIFAR_RECORD,
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: CIFAR_CLASSES,
                });
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("cifar file list".into()));
    }
    let images = Tensor::new(&[labels.len(), 3, 32, 32], data)?;
    Dataset::new(images, labels, CIFAR_CLASSES, Split::Train)
}
