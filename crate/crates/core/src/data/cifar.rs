//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 32×32 red, green and blue planes.

use std::path::Path;

use super::{Augmentation, DataError, Dataset, Result, Split};

pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * SIDE * SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// Undecoded records: labels and raw channel-plane bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawBatch {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn extend(&mut self, other: RawBatch) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn scaled(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| f32::from(b) / 255.0).collect()
    }
}

/// Parses whole records. Offsets in errors count from `base_offset`, so
/// byte `b` of record `i` is reported as `base_offset + i·3073 + b`.
pub fn parse_records(bytes: &[u8], base_offset: u64) -> Result<RawBatch> {
    let whole = bytes.len() / RECORD_BYTES;
    if bytes.len() % RECORD_BYTES != 0 {
        let offset = base_offset + (whole * RECORD_BYTES) as u64;
        return Err(DataError::Format {
            offset,
            detail: format!(
                "{} trailing bytes do not form a {RECORD_BYTES}-byte record",
                bytes.len() - whole * RECORD_BYTES
            ),
        });
    }
    let mut out = RawBatch { labels: Vec::with_capacity(whole), pixels: Vec::with_capacity(whole * IMAGE_BYTES) };
    for (i, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = record[0];
        if usize::from(label) >= CLASSES {
            return Err(DataError::Corruption {
                offset: base_offset + (i * RECORD_BYTES) as u64,
                detail: format!("label byte {label} exceeds {}", CLASSES - 1),
            });
        }
        out.labels.push(label);
        out.pixels.extend_from_slice(&record[1..]);
    }
    Ok(out)
}

pub fn encode_record(label: u8, image: &[u8]) -> Vec<u8> {
    assert_eq!(image.len(), IMAGE_BYTES, "a record holds exactly one 3x32x32 image");
    let mut out = Vec::with_capacity(RECORD_BYTES);
    out.push(label);
    out.extend_from_slice(image);
    out
}

pub fn encode_records(batch: &RawBatch) -> Vec<u8> {
    (0..batch.len()).flat_map(|i| encode_record(batch.labels[i], batch.image(i))).collect()
}

/// Reads one standard batch file, which must hold exactly 10,000 records.
pub fn read_batch_file(path: &Path) -> Result<RawBatch> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let expected = RECORDS_PER_FILE * RECORD_BYTES;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected) as u64;
        return Err(DataError::Format {
            offset,
            detail: format!("{} is {} bytes, expected {expected}", path.display(), bytes.len()),
        });
    }
    parse_records(&bytes, 0)
}

/// Loads the five training batches and the test batch from `dir`.
/// Normalization is fitted on the training images; augmentation is enabled
/// on the training split only.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = RawBatch::default();
    for name in TRAIN_FILES {
        train.extend(read_batch_file(&dir.join(name))?);
    }
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    let train_ds = to_dataset(&train, Split::Train, None)?.with_augmentation(Augmentation::CIFAR);
    let test_ds = to_dataset(&test, Split::Test, Some(train_ds.normalization()))?;
    Ok((train_ds, test_ds))
}

pub fn to_dataset(batch: &RawBatch, split: Split, norm: Option<&super::Normalization>) -> Result<Dataset> {
    Dataset::from_raw(
        batch.scaled(),
        [batch.len(), 3, SIDE, SIDE],
        batch.labels.iter().map(|&l| usize::from(l)).collect(),
        CLASSES,
        split,
        norm,
    )
}
