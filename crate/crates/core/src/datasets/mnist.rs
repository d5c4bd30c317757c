//! MNIST IDX files: big-endian header, magic 2051 (images) / 2049 (labels).

use std::path::{Path, PathBuf};

use super::{Dataset, DatasetId, DatasetPair, FileReport, Split};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path, "file missing")
        } else {
            Error::io(path, e)
        }
    })
}

/// Validates an IDX image file and returns `(count, rows, cols, pixels)`.
pub(crate) fn parse_images<'a>(path: &Path, b: &'a [u8]) -> Result<(usize, usize, usize, &'a [u8])> {
    if b.len() < 16 {
        return Err(Error::format(
            path,
            format!("header needs 16 bytes, file has {}", b.len()),
        ));
    }
    let magic = be_u32(b, 0);
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"),
        ));
    }
    let (n, rows, cols) = (
        be_u32(b, 4) as usize,
        be_u32(b, 8) as usize,
        be_u32(b, 12) as usize,
    );
    let expected = 16 + n * rows * cols;
    if b.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for {n} images of {rows}x{cols}, found {}",
                b.len()
            ),
        ));
    }
    Ok((n, rows, cols, &b[16..]))
}

/// Validates an IDX label file and returns the label bytes.
pub(crate) fn parse_labels<'a>(path: &Path, b: &'a [u8]) -> Result<&'a [u8]> {
    if b.len() < 8 {
        return Err(Error::format(
            path,
            format!("header needs 8 bytes, file has {}", b.len()),
        ));
    }
    let magic = be_u32(b, 0);
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"),
        ));
    }
    let n = be_u32(b, 4) as usize;
    if b.len() != 8 + n {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {n} labels, found {}", 8 + n, b.len()),
        ));
    }
    if let Some(bad) = b[8..].iter().find(|&&l| l > 9) {
        return Err(Error::format(path, format!("label {bad} outside [0, 10)")));
    }
    Ok(&b[8..])
}

fn load_split(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let ib = read(&ip)?;
    let lb = read(&lp)?;
    let (n, rows, cols, px) = parse_images(&ip, &ib)?;
    if (rows, cols) != (28, 28) {
        return Err(Error::format(
            &ip,
            format!("images are {rows}x{cols}, expected 28x28"),
        ));
    }
    let lab = parse_labels(&lp, &lb)?;
    if lab.len() != n {
        return Err(Error::format(
            &lp,
            format!("{} labels but {n} images in {}", lab.len(), ip.display()),
        ));
    }
    Dataset::new(DatasetId::Mnist, split, px.to_vec(), lab.to_vec())
}

/// Loads both MNIST splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<DatasetPair> {
    Ok(DatasetPair {
        train: load_split(dir, TRAIN_IMAGES, TRAIN_LABELS, Split::Train)?,
        test: load_split(dir, TEST_IMAGES, TEST_LABELS, Split::Test)?,
    })
}

/// Per-file validation against the official layout and counts
/// (60000 train / 10000 test).
pub fn check_mnist(dir: &Path) -> Vec<FileReport> {
    let spec = [
        (TRAIN_IMAGES, true, 60_000usize),
        (TRAIN_LABELS, false, 60_000),
        (TEST_IMAGES, true, 10_000),
        (TEST_LABELS, false, 10_000),
    ];
    spec.iter()
        .map(|&(name, is_images, want)| {
            let path: PathBuf = dir.join(name);
            let res = read(&path).and_then(|b| {
                let n = if is_images {
                    parse_images(&path, &b)?.0
                } else {
                    parse_labels(&path, &b)?.len()
                };
                if n != want {
                    return Err(Error::format(&path, format!("{n} records, expected {want}")));
                }
                Ok(n)
            });
            FileReport::from_result(path, res)
        })
        .collect()
}

/// IDX image file bytes for `n` images of `rows x cols`.
pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
