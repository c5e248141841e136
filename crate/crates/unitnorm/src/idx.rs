//! Big-endian IDX containers as used by the MNIST distribution.
//!
//! ```text
//! images: 0x00000803, count, rows, cols, then count*rows*cols unsigned bytes
//! labels: 0x00000801, count, then count unsigned bytes
//! ```
//!
//! Files are read uncompressed.

use std::fs;
use std::path::{Path, PathBuf};

use unitnorm_core::data::{MnistDataset, MNIST_CLASSES};
use unitnorm_core::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{what}: expected magic {expected:#010x}, found {found:#010x}")]
    Magic { what: &'static str, expected: u32, found: u32 },
    #[error("{what}: header is truncated")]
    TruncatedHeader { what: &'static str },
    #[error("{what}: payload has {actual} bytes, header promises {expected}")]
    PayloadLength { what: &'static str, expected: usize, actual: usize },
    #[error("label {label} at position {index} is not a digit")]
    Label { index: usize, label: u8 },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] unitnorm_core::Error),
}

/// How raw pixel bytes become matrix entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelScale {
    /// Divide by 255 so pixels lie in [0, 1].
    #[default]
    Unit,
    /// Keep the byte values 0..=255.
    Raw,
}

fn header(bytes: &[u8], what: &'static str, words: usize) -> Result<Vec<u32>, IdxError> {
    if bytes.len() < 4 * words {
        return Err(IdxError::TruncatedHeader { what });
    }
    Ok(bytes[..4 * words].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, expected: usize, what: &'static str) -> Result<&'a [u8], IdxError> {
    let actual = bytes.len() - offset;
    if actual != expected {
        return Err(IdxError::PayloadLength { what, expected, actual });
    }
    Ok(&bytes[offset..])
}

/// Parses an image file into a `count x (rows*cols)` matrix, one image per row.
pub fn load_idx_images(bytes: &[u8], scale: PixelScale) -> Result<Matrix, IdxError> {
    let what = "images";
    let magic = header(bytes, what, 1)?[0];
    if magic != IMAGES_MAGIC {
        return Err(IdxError::Magic { what, expected: IMAGES_MAGIC, found: magic });
    }
    let h = header(bytes, what, 4)?;
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let pixels = rows * cols;
    let data = payload(bytes, 16, count * pixels, what)?;
    let div = match scale {
        PixelScale::Unit => 255.0,
        PixelScale::Raw => 1.0,
    };
    let values = data.iter().map(|&b| f64::from(b) / div).collect();
    Ok(Matrix::from_vec(count, pixels, values)?)
}

/// Parses a label file; every label must be a digit.
pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let what = "labels";
    let magic = header(bytes, what, 1)?[0];
    if magic != LABELS_MAGIC {
        return Err(IdxError::Magic { what, expected: LABELS_MAGIC, found: magic });
    }
    let count = header(bytes, what, 2)?[1] as usize;
    let data = payload(bytes, 8, count, what)?;
    data.iter()
        .enumerate()
        .map(|(index, &label)| {
            if usize::from(label) < MNIST_CLASSES {
                Ok(usize::from(label))
            } else {
                Err(IdxError::Label { index, label })
            }
        })
        .collect()
}

/// Encodes images (values already in byte range) as an IDX image file.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io { path: path.to_path_buf(), source })
}

/// Locations of the four MNIST files.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    /// The standard file names inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        MnistPaths {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn all_exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels].iter().all(|p| p.is_file())
    }
}

pub fn load_mnist(paths: &MnistPaths, scale: PixelScale) -> Result<MnistDataset, IdxError> {
    let train_images = load_idx_images(&read(&paths.train_images)?, scale)?;
    let train_labels = load_idx_labels(&read(&paths.train_labels)?)?;
    let test_images = load_idx_images(&read(&paths.test_images)?, scale)?;
    let test_labels = load_idx_labels(&read(&paths.test_labels)?)?;
    Ok(MnistDataset::new(train_images, train_labels, test_images, test_labels)?)
}
