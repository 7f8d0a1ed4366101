//! IDX (MNIST) file reader: big-endian header, unsigned-byte payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::{DatasetSplit, Samples};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::IdxFormat {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < len {
            return Err(self.fail(
                self.bytes.len(),
                format!("payload truncated: expected {len} bytes, found {avail}"),
            ));
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

fn expect_magic(r: &mut Reader<'_>, magic: u32) -> Result<()> {
    let found = r.u32("magic number")?;
    if found != magic {
        return Err(r.fail(0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    Ok(())
}

/// Images as `[n, rows, cols]` with bytes scaled into [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    expect_magic(&mut r, IMAGES_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let payload = r.payload(n * rows * cols)?;
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, rows, cols], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    expect_magic(&mut r, LABELS_MAGIC)?;
    let n = r.u32("label count")? as usize;
    let payload = r.payload(n)?;
    if let Some(i) = payload.iter().position(|&b| b > 9) {
        return Err(r.fail(8 + i, format!("label {} outside 0..=9", payload[i])));
    }
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Reads a matching image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Samples> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.batch_size() != labels.len() {
        return Err(Error::IdxFormat {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!(
                "label count {} does not match image count {}",
                labels.len(),
                images.batch_size()
            ),
        });
    }
    Samples::new(images, labels)
}

/// Train/test MNIST split with a channel axis added: inputs `[n, 1, rows, cols]`.
pub fn load_mnist_split(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<DatasetSplit> {
    let with_channel = |s: Samples| -> Result<Samples> {
        let mut shape = s.inputs.shape().to_vec();
        shape.insert(1, 1);
        Samples::new(s.inputs.reshape(shape)?, s.labels)
    };
    let train = with_channel(load_idx(train_images, train_labels)?)?;
    let test = with_channel(load_idx(test_images, test_labels)?)?;
    DatasetSplit::new(train, test, 10)
}
