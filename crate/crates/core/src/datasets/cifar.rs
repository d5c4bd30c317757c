//! CIFAR-10 binary batches: 3073-byte records (label, 1024 R, 1024 G, 1024 B).

use std::path::{Path, PathBuf};

use super::{Dataset, DatasetId, DatasetPair, FileReport, Split};
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Splits a batch file into `(pixels, labels)`.
pub(crate) fn parse_batch(path: &Path, b: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if b.is_empty() || !b.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            path,
            format!(
                "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                b.len()
            ),
        ));
    }
    let n = b.len() / CIFAR_RECORD;
    let mut px = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in b.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0]);
        px.extend_from_slice(&rec[1..]);
    }
    Ok((px, labels))
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

fn load_files(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut px = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let p = dir.join(f);
        let (a, b) = parse_batch(&p, &read(&p)?)?;
        px.extend(a);
        labels.extend(b);
    }
    Dataset::new(DatasetId::Cifar10, split, px, labels)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<DatasetPair> {
    Ok(DatasetPair {
        train: load_files(dir, &TRAIN_FILES, Split::Train)?,
        test: load_files(dir, &[TEST_FILE], Split::Test)?,
    })
}

/// Per-file validation; each official batch holds exactly 10000 records.
pub fn check_cifar10(dir: &Path) -> Vec<FileReport> {
    TRAIN_FILES
        .iter()
        .chain(std::iter::once(&TEST_FILE))
        .map(|name| {
            let path: PathBuf = dir.join(name);
            let res = read(&path).and_then(|b| {
                let (_, labels) = parse_batch(&path, &b)?;
                if labels.len() != 10_000 {
                    return Err(Error::format(
                        &path,
                        format!("{} records, expected 10000", labels.len()),
                    ));
                }
                Ok(labels.len())
            });
            FileReport::from_result(path, res)
        })
        .collect()
}

/// Inverse of the batch parser.
pub fn encode_cifar_records(pixels: &[u8], labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, px) in labels.iter().zip(pixels.chunks(CIFAR_RECORD - 1)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_size_and_labels_checked() {
        let p = Path::new("b.bin");
        assert!(parse_batch(p, &vec![0u8; CIFAR_RECORD * 2]).is_ok());
        assert!(parse_batch(p, &vec![0u8; CIFAR_RECORD * 2 + 1]).is_err());
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(parse_batch(p, &rec).is_err());
    }

    #[test]
    fn zero_record_normalizes_to_minus_mean_over_std() {
        let (px, labels) = parse_batch(Path::new("b"), &vec![0u8; CIFAR_RECORD]).unwrap();
        let ds = Dataset::new(DatasetId::Cifar10, Split::Test, px, labels).unwrap();
        let (x, l) = ds.gather(&[0]).unwrap();
        assert_eq!(l, vec![0]);
        let norm = DatasetId::Cifar10.normalization();
        for c in 0..3 {
            let v = x.data()[c * 1024 + 17];
            assert!((v - (-norm.mean[c] / norm.std[c])).abs() < 1e-6);
        }
    }
}
