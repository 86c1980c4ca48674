//! IDX-format MNIST loading.
//!
//! Files are big-endian: images carry magic 0x00000803 and dims
//! (count, rows, cols) followed by unsigned bytes; labels carry magic
//! 0x00000801 and a count. Pixels are scaled to [0, 1] on batch extraction.

use crate::error::{DppError, Result};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

struct IdxReader {
    path: String,
    bytes: Vec<u8>,
    offset: usize,
}

impl IdxReader {
    fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DppError::Data(format!(
            "cannot read {}: {e}",
            path.display()
        )))?;
        Ok(Self {
            path: path.display().to_string(),
            bytes,
            offset: 0,
        })
    }

    fn corrupt(&self, reason: &str) -> DppError {
        DppError::CorruptFile {
            path: self.path.clone(),
            reason: reason.to_string(),
            offset: self.offset as u64,
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        if self.offset + 4 > self.bytes.len() {
            return Err(self.corrupt("truncated header"));
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..self.offset + 4].try_into().unwrap());
        self.offset += 4;
        Ok(v)
    }

    fn read_exact(&mut self, n: usize) -> Result<&[u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(self.corrupt(&format!(
                "truncated payload: need {n} bytes, {} remain",
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }
}

/// Load an images/labels pair of IDX files into one dataset.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = IdxReader::open(images_path)?;
    let magic = img.read_u32()?;
    if magic != IMAGES_MAGIC {
        return Err(img.corrupt(&format!(
            "bad images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = img.read_u32()? as usize;
    let rows = img.read_u32()? as usize;
    let cols = img.read_u32()? as usize;
    let pixels = img.read_exact(count * rows * cols)?.to_vec();
    if img.offset != img.bytes.len() {
        return Err(img.corrupt("trailing bytes after image payload"));
    }

    let mut lab = IdxReader::open(labels_path)?;
    let magic = lab.read_u32()?;
    if magic != LABELS_MAGIC {
        return Err(lab.corrupt(&format!(
            "bad labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = lab.read_u32()? as usize;
    if label_count != count {
        return Err(DppError::Data(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let labels = lab.read_exact(label_count)?.to_vec();
    if labels.iter().any(|&l| l > 9) {
        return Err(DppError::Data("label outside 0-9".into()));
    }

    Ok(Dataset { pixels, labels, rows, cols })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// First `n` items as their own dataset.
    pub fn subset(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let px = self.rows * self.cols;
        Self {
            pixels: self.pixels[..n * px].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Build an in-memory dataset (synthetic fixtures and tests).
    pub fn from_raw(pixels: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if pixels.len() != labels.len() * rows * cols {
            return Err(DppError::Data(format!(
                "{} pixels for {} {}x{} images",
                pixels.len(),
                labels.len(),
                rows,
                cols
            )));
        }
        Ok(Self { pixels, labels, rows, cols })
    }

    /// `[batch, rows*cols]` f32 batch scaled to [0, 1].
    pub fn flat_batch(&self, indices: &[usize]) -> Tensor<f32> {
        let px = self.rows * self.cols;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend(
                self.pixels[i * px..(i + 1) * px]
                    .iter()
                    .map(|&b| b as f32 / 255.0),
            );
        }
        Tensor::new(vec![indices.len(), px], data).expect("batch shape")
    }

    /// `[batch, 1, rows, cols]` f32 batch scaled to [0, 1].
    pub fn nchw_batch(&self, indices: &[usize]) -> Tensor<f32> {
        self.flat_batch(indices)
            .reshaped(vec![indices.len(), 1, self.rows, self.cols])
            .expect("batch shape")
    }

    /// One-hot rows over 10 classes.
    pub fn one_hot(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = vec![0.0f32; indices.len() * 10];
        for (r, &i) in indices.iter().enumerate() {
            data[r * 10 + self.labels[i] as usize] = 1.0;
        }
        Tensor::new(vec![indices.len(), 10], data).expect("one-hot shape")
    }
}

/// Data directory resolution: `DPP_DATA_DIR` if set, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("DPP_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn train_pair(dir: &Path) -> (PathBuf, PathBuf) {
    (
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
}

pub fn test_pair(dir: &Path) -> (PathBuf, PathBuf) {
    (
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )
}
