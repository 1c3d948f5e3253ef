//! CIFAR-style binary records: `coarse u8 | fine u8 | C·H·W u8`, channel
//! planes in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const CIFAR100_TRAIN: usize = 50_000;
pub const CIFAR100_TEST: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CifarLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl CifarLayout {
    pub const CIFAR100: CifarLayout = CifarLayout { channels: 3, height: 32, width: 32, num_classes: 100 };

    pub fn record_size(&self) -> usize {
        2 + self.channels * self.height * self.width
    }
}

/// Reads one binary file. With `expected_records`, the file must hold
/// exactly that many records; otherwise any whole number of records.
pub fn load_cifar_binary(
    path: impl AsRef<Path>,
    layout: CifarLayout,
    split: Split,
    expected_records: Option<usize>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let record = layout.record_size();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |message: String| Error::Data { path: path.to_path_buf(), message };
    match expected_records {
        Some(n) if bytes.len() != n * record => {
            return Err(fail(format!(
                "expected {} bytes ({n} records of {record}), found {}",
                n * record,
                bytes.len()
            )))
        }
        None if bytes.len() % record != 0 => {
            return Err(fail(format!(
                "size {} is not a multiple of the {record}-byte record size",
                bytes.len()
            )))
        }
        _ => {}
    }
    let count = bytes.len() / record;
    let mut images = Vec::with_capacity(count * (record - 2));
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let fine = rec[1] as usize;
        if fine >= layout.num_classes {
            return Err(fail(format!("record {i} has label {fine}, expected < {}", layout.num_classes)));
        }
        labels.push(fine);
        images.extend_from_slice(&rec[2..]);
    }
    Dataset::new(images, [layout.channels, layout.height, layout.width], labels, layout.num_classes, split)
}

/// `train.bin` and `test.bin` of the CIFAR-100 binary distribution.
pub fn load_cifar100(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let layout = CifarLayout::CIFAR100;
    let train = load_cifar_binary(dir.join("train.bin"), layout, Split::Train, Some(CIFAR100_TRAIN))?;
    let test = load_cifar_binary(dir.join("test.bin"), layout, Split::Test, Some(CIFAR100_TEST))?;
    Ok((train, test))
}

/// Writes `dataset` in the same record layout, with coarse label 0.
pub fn write_cifar_binary(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.num_classes() > 256 {
        return Err(Error::Validation("labels above 255 do not fit the record layout".into()));
    }
    let per: usize = dataset.dims().iter().product();
    let mut out = Vec::with_capacity(dataset.len() * (per + 2));
    for i in 0..dataset.len() {
        out.push(0);
        out.push(dataset.labels()[i] as u8);
        out.extend_from_slice(dataset.image(i));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
