//! Big-endian IDX files (the MNIST distribution format).
//!
//! Images: magic `0x00000803`, then `u32` count, rows, cols, then
//! `count * rows * cols` unsigned bytes. Labels: magic `0x00000801`, `u32`
//! count, then `count` bytes.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            Error::parse(
                offset,
                format!(
                    "truncated header reading {what}: expected {} bytes, file has {}",
                    offset + 4,
                    bytes.len()
                ),
            )
        })
}

fn payload<'a>(bytes: &'a [u8], header: usize, expected: usize) -> Result<&'a [u8]> {
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::parse(
            header,
            format!(
                "expected {expected} data bytes after the {header}-byte header ({} total), found {actual} ({} total)",
                header + expected,
                bytes.len()
            ),
        ));
    }
    Ok(&bytes[header..])
}

/// Parses an IDX image file into an `(N, 1, rows, cols)` tensor scaled to
/// `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        ));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::parse(4, format!("empty image file ({count}x{rows}x{cols})")));
    }
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse(4, "image dimensions overflow"))?;
    let raw = payload(bytes, 16, expected)?;
    Tensor::new(
        vec![count, 1, rows, cols],
        raw.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        ));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    dataset_from_idx(images, &labels, split)
}

pub(crate) fn dataset_from_idx(images: Tensor, labels: &[u8], split: Split) -> Result<Dataset> {
    if images.batch() != labels.len() {
        return Err(Error::parse(
            4,
            format!(
                "image file holds {} images but label file holds {} labels",
                images.batch(),
                labels.len()
            ),
        ));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
    Dataset::new(
        images,
        labels.iter().map(|&l| l as usize).collect(),
        classes,
        split,
        0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2x3 images, written out byte by byte.
    fn fixture_images() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        b.extend_from_slice(&[0, 51, 102, 153, 204, 255]);
        b.extend_from_slice(&[255, 0, 255, 0, 255, 0]);
        b
    }

    fn fixture_labels() -> Vec<u8> {
        vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0]
    }

    #[test]
    fn parses_hand_built_fixture() {
        let t = parse_idx_images(&fixture_images()).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(&t.data()[..6], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(&t.data()[6..], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(parse_idx_labels(&fixture_labels()).unwrap(), vec![1, 0]);
        let d = dataset_from_idx(t, &[1, 0], Split::Train).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.classes, 2);
    }

    #[test]
    fn truncated_file_names_expected_and_actual() {
        let mut b = fixture_images();
        b.truncate(20);
        let err = parse_idx_images(&b).unwrap_err().to_string();
        assert!(err.contains("expected 12 data bytes") && err.contains("found 4"), "{err}");
        let err = parse_idx_images(&b[..10]).unwrap_err().to_string();
        assert!(err.contains("expected 12 bytes, file has 10"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        assert!(parse_idx_images(&fixture_labels()).is_err());
        assert!(parse_idx_labels(&fixture_images()).is_err());
    }

    #[test]
    fn count_mismatch_rejected() {
        let t = parse_idx_images(&fixture_images()).unwrap();
        assert!(dataset_from_idx(t, &[1], Split::Train).is_err());
    }
}
