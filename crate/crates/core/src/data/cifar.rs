//! CIFAR-10 binary batches: records of one label byte followed by
//! 3x32x32 pixel bytes, channel-major.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Splits a batch file into pixel and label bytes.
fn records(bytes: &[u8], source: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(
            source,
            whole as u64,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                source,
                (k * CIFAR_RECORD) as u64,
                format!("label byte {} outside 0..=9", rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

pub fn parse_cifar_batch(bytes: &[u8], source: &str) -> Result<Dataset> {
    let (pixels, labels) = records(bytes, source)?;
    Dataset::new(source, 10, (3, 32, 32), pixels, labels)
}

/// Inverse of [`parse_cifar_batch`].
pub fn write_cifar_batch(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != (3, 32, 32) || ds.num_classes > 10 {
        return Err(Error::dim(format!(
            "CIFAR records hold 3x32x32 images with 10 classes, got {:?} with {}",
            ds.image_shape(),
            ds.num_classes
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels()[i]);
        out.extend_from_slice(ds.raw_image(i));
    }
    Ok(out)
}

fn read_batches(dir: &Path, files: &[&str]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let source = path.display().to_string();
        let bytes = std::fs::read(&path).map_err(|e| Error::format(&source, 0, format!("cannot read: {e}")))?;
        let (p, l) = records(&bytes, &source)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok((pixels, labels))
}

/// Loads the five training batches and the test batch from `dir`. The test
/// set is normalized with the training statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (p, l) = read_batches(dir, &TRAIN_FILES)?;
    let train = Dataset::new("cifar10-train", 10, (3, 32, 32), p, l)?;
    let (p, l) = read_batches(dir, &[TEST_FILE])?;
    let test = Dataset::new("cifar10-test", 10, (3, 32, 32), p, l)?.with_stats(train.stats().clone())?;
    Ok((train, test))
}
