//! IDX (MNIST-family) reader and writer.
//!
//! Layout: big-endian `u32` magic (`0x00000803` for rank-3 `u8` images,
//! `0x00000801` for rank-1 `u8` labels), one big-endian `u32` per
//! dimension, then the raw bytes. Gzip-wrapped files are detected by their
//! header and decompressed first; offsets in errors refer to the
//! decompressed stream.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::dataset::{ImageShape, LabeledImageSet};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an image file and its label file into a labeled set.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    decode_idx(&images, &labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.at + 4;
        let b = self.bytes.get(self.at..end).ok_or_else(|| {
            Error::parse(self.at as u64, format!("truncated file while reading {what}"))
        })?;
        self.at = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at + n;
        let b = self.bytes.get(self.at..end).ok_or_else(|| {
            Error::parse(
                self.bytes.len() as u64,
                format!(
                    "truncated {what}: need {n} bytes from offset {}, file has {}",
                    self.at,
                    self.bytes.len()
                ),
            )
        })?;
        self.at = end;
        Ok(b)
    }
}

/// Decodes an (images, labels) pair of in-memory IDX buffers.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet> {
    let (count, height, width, pixels) = decode_images(images)?;
    let label_bytes = decode_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::domain(format!(
            "image/label count mismatch: {count} images, {} labels",
            label_bytes.len()
        )));
    }
    let labels: Vec<u32> = label_bytes.iter().map(|&b| b as u32).collect();
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let images = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    LabeledImageSet::new(
        ImageShape {
            height,
            width,
            channels: 1,
        },
        images,
        labels,
        LabeledImageSet::numbered_classes(classes),
    )
}

fn decode_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.u32("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = r.u32("image count")? as usize;
    let height = r.u32("row count")? as usize;
    let width = r.u32("column count")? as usize;
    let pixels = r.take(count * height * width, "pixel data")?;
    Ok((count, height, width, pixels))
}

fn decode_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.u32("magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = r.u32("label count")? as usize;
    r.take(count, "label data")
}

/// Encodes single-channel images; pixels are quantized as `round(255·v)`.
pub fn encode_idx_images(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let shape = set.shape();
    if shape.channels != 1 {
        return Err(Error::domain("IDX image files hold single-channel images"));
    }
    let mut out = Vec::with_capacity(16 + set.pixels().len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&(shape.height as u32).to_be_bytes());
    out.extend_from_slice(&(shape.width as u32).to_be_bytes());
    out.extend(set.pixels().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(set: &LabeledImageSet) -> Result<Vec<u8>> {
    if set.num_classes() > 256 {
        return Err(Error::domain("IDX label files hold u8 labels"));
    }
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend(set.labels().iter().map(|&l| l as u8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2x3 images: bytes 0..6 and 250..255, labels 7 and 1.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend([0, 51, 102, 153, 204, 255]);
        img.extend([250, 251, 252, 253, 254, 255]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 1];
        (img, lab)
    }

    #[test]
    fn decodes_fixture() {
        let (img, lab) = fixture();
        let set = decode_idx(&img, &lab).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels(), &[7, 1]);
        assert_eq!(set.num_classes(), 8);
        assert_eq!(set.image(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(set.image(1)[0], 250.0 / 255.0);
    }

    #[test]
    fn zero_magic_fails_at_offset_zero() {
        let (mut img, lab) = fixture();
        img[2] = 0;
        img[3] = 0;
        assert!(matches!(decode_idx(&img, &lab), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let (img, lab) = fixture();
        let err = decode_idx(&img[..20], &lab).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 20, .. }), "{err}");
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let (img, _) = fixture();
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        assert!(matches!(decode_idx(&img, &lab), Err(Error::Domain(_))));
    }

    #[test]
    fn encode_reproduces_fixture_bytes() {
        let (img, lab) = fixture();
        let set = decode_idx(&img, &lab).unwrap();
        assert_eq!(encode_idx_images(&set).unwrap(), img);
        assert_eq!(encode_idx_labels(&set).unwrap(), lab);
    }
}
