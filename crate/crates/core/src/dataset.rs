//! MNIST ingestion from IDX files and seeded mini-batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LdamError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the directory that holds the IDX files.
pub const DATA_DIR_ENV: &str = "LDAM_DATA_DIR";

/// Decodes an unsigned-byte IDX file.
///
/// Image files (`0x00000803`) become an `[N, rows, cols]` tensor scaled to
/// `[0, 1]`; label files (`0x00000801`) become an `[N]` tensor of raw values.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(LdamError::Idx {
                offset: 0,
                reason: format!("unsupported magic {other:#010x}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(read_u32(bytes, 4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * ndims;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| LdamError::Idx {
            offset: 4,
            reason: format!("dimensions {dims:?} overflow or are empty"),
        })?;
    let payload = bytes.get(header..).unwrap_or(&[]);
    if payload.len() < count {
        return Err(LdamError::Idx {
            offset: header + payload.len(),
            reason: format!("payload truncated: need {count} bytes, have {}", payload.len()),
        });
    }
    if payload.len() > count {
        return Err(LdamError::Idx {
            offset: header + count,
            reason: format!("{} trailing bytes after payload", payload.len() - count),
        });
    }
    let data = if magic == IDX_IMAGES_MAGIC {
        payload.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        payload.iter().map(|&b| b as f32).collect()
    };
    Tensor::new(dims, data)
}

/// Inverse of [`parse_idx`]: rank-3 tensors are written as images, rank-1 as labels.
pub fn encode_idx(t: &Tensor) -> Result<Vec<u8>> {
    let (magic, scale) = match t.shape().len() {
        3 => (IDX_IMAGES_MAGIC, 255.0f32),
        1 => (IDX_LABELS_MAGIC, 1.0),
        r => {
            return Err(LdamError::InvalidArgument(format!(
                "IDX encoding supports rank 1 or 3, got rank {r}"
            )))
        }
    };
    let mut out = Vec::with_capacity(4 + 4 * t.shape().len() + t.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| LdamError::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    for &v in t.data() {
        let b = (v * scale).round();
        if !(0.0..=255.0).contains(&b) {
            return Err(LdamError::InvalidArgument(format!(
                "value {v} does not fit an unsigned byte"
            )));
        }
        out.push(b as u8);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LdamError::Idx {
            offset,
            reason: format!("header truncated: {} bytes available", bytes.len()),
        })
}

/// Images `[N, 1, H, W]` in `[0, 1]` paired with class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[1] != 1 {
            return Err(LdamError::InvalidArgument(format!(
                "images must be [N, 1, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(LdamError::InvalidArgument(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(LdamError::InvalidArgument("pixel values outside [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self> {
        let img = parse_idx(images)?;
        let lab = parse_idx(labels)?;
        if img.shape().len() != 3 || lab.shape().len() != 1 {
            return Err(LdamError::InvalidArgument(
                "expected an image file and a label file".into(),
            ));
        }
        let (n, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let img = img.reshape(&[n, 1, h, w])?;
        let labels = lab.data().iter().map(|&v| v as u8).collect();
        Self::new(img, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// One image as `[1, 1, H, W]`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.rows(i, 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// The first `n` items (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: self.images.rows(0, n)?,
            labels: self.labels[..n].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Resolves the data directory from an explicit flag or `LDAM_DATA_DIR`.
pub fn resolve_data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| {
            LdamError::InvalidArgument(format!(
                "no data directory: pass --data-dir or set {DATA_DIR_ENV} (see `ldam fetch`)"
            ))
        })
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let (img, lab) = split.file_names();
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LdamError::MissingData(p),
            _ => e.into(),
        })
    };
    LabeledDataset::from_idx(&read(img)?, &read(lab)?)
}

/// One epoch of seeded, shuffled mini-batches. The final batch may be short.
pub struct BatchIter<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter(ds: &LabeledDataset, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(LdamError::InvalidArgument(format!(
            "batch size {batch_size} must be in 1..={}",
            ds.len()
        )));
    }
    Ok(BatchIter {
        ds,
        order: epoch_permutation(ds.len(), seed),
        batch_size,
        pos: 0,
    })
}

pub fn epoch_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

impl BatchIter<'_> {
    pub fn indices(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.ds.images.gather_rows(idx).ok()?;
        let labels = idx.iter().map(|&i| self.ds.labels[i]).collect();
        Some((images, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> LabeledDataset {
        let images = Tensor::new(
            vec![n, 1, 2, 2],
            (0..n * 4).map(|i| (i % 256) as f32 / 255.0).collect(),
        )
        .unwrap();
        LabeledDataset::new(images, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn truncated_label_header() {
        let err = parse_idx(&[0, 0, 8, 1]).unwrap_err();
        assert!(matches!(err, LdamError::Idx { offset: 4, .. }), "{err}");
    }

    #[test]
    fn wrong_magic_and_truncated_payload() {
        assert!(matches!(
            parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1, 5]),
            Err(LdamError::Idx { offset: 0, .. })
        ));
        let err = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]).unwrap_err();
        assert!(matches!(err, LdamError::Idx { offset: 10, .. }), "{err}");
    }

    #[test]
    fn dimension_overflow() {
        let mut b = vec![0, 0, 8, 3];
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        // 32-bit targets overflow on the product; 64-bit ones on the payload.
        assert!(matches!(parse_idx(&b), Err(LdamError::Idx { .. })));
    }

    #[test]
    fn image_bytes_scale_to_unit_interval() {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255]);
        let t = parse_idx(&b).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert_eq!(encode_idx(&t).unwrap(), b);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let ds = tiny(4);
        let batches: Vec<_> = batch_iter(&ds, 2, 9).unwrap().collect();
        assert_eq!(batches.len(), 2);
        let it = batch_iter(&ds, 2, 9).unwrap();
        let mut seen = it.indices().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn last_short_batch_is_emitted() {
        let ds = tiny(5);
        let sizes: Vec<usize> = batch_iter(&ds, 2, 1).unwrap().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn permutation_is_seeded() {
        assert_eq!(epoch_permutation(1000, 5), epoch_permutation(1000, 5));
        assert_ne!(epoch_permutation(1000, 5), epoch_permutation(1000, 6));
    }

    #[test]
    fn batch_size_must_fit() {
        assert!(batch_iter(&tiny(3), 4, 0).is_err());
        assert!(batch_iter(&tiny(3), 0, 0).is_err());
    }
}
