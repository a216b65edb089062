use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (optionally gzip-compressed).
pub fn load_idx_dataset(image_file: impl AsRef<Path>, label_file: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_maybe_gz(image_file.as_ref())?;
    let labels = read_maybe_gz(label_file.as_ref())?;
    let name = image_file.as_ref().file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    parse_idx_dataset(&name, &images, &labels)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(Error::io(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(Error::io(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let Some(b) = self.bytes.get(self.pos..self.pos + 4) else {
            return Err(Error::Format { offset: self.pos as u64, message: format!("truncated header reading {what}") });
        };
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated payload: expected {len} bytes from offset {}, found {available}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn expect_magic(cur: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let magic = cur.u32("magic number")?;
    if magic != expected {
        return Err(Error::Format { offset: 0, message: format!("bad magic number {magic:#010x}, expected {expected:#010x}") });
    }
    Ok(())
}

/// Parses in-memory IDX payloads. Pixels are rescaled from `0..=255` to `[0, 1]`.
pub fn parse_idx_dataset(name: &str, image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let mut img = Cursor { bytes: image_bytes, pos: 0 };
    expect_magic(&mut img, IMAGE_MAGIC)?;
    let n_images = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let raw_pixels = img.payload(n_images * rows * cols)?;

    let mut lab = Cursor { bytes: label_bytes, pos: 0 };
    expect_magic(&mut lab, LABEL_MAGIC)?;
    let n_labels = lab.u32("label count")? as usize;
    let raw_labels = lab.payload(n_labels)?;

    if n_images != n_labels {
        return Err(Error::Consistency(format!("image file holds {n_images} items but label file holds {n_labels}")));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let pixels = raw_pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(name, ImageShape::new(1, rows, cols), class_count, pixels, labels)
}
