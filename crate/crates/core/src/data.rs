//! Datasets: a seeded Gaussian-blob generator and an IDX (MNIST-family) reader.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::linalg::Matrix;
use crate::net::Targets;
use crate::rng::{Rng, Stream};
use crate::trainer::Batch;
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples are columns of `inputs` (`dim x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets, n_classes: usize) -> Result<Self> {
        if targets.len() != inputs.cols() {
            return Err(Error::dims("dataset targets", inputs.cols(), targets.len()));
        }
        match &targets {
            Targets::Labels(labels) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                    return Err(Error::dims("dataset labels", format!("< {n_classes}"), bad));
                }
            }
            Targets::Values(y) => {
                if !y.is_finite() {
                    return Err(Error::NonFinite("dataset targets"));
                }
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.inputs.rows()
    }

    /// Width of the network output this dataset needs.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Labels(_) => self.n_classes,
            Targets::Values(y) => y.rows(),
        }
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let inputs = Matrix::from_fn(self.dim(), indices.len(), |i, j| self.inputs[(i, indices[j])]);
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&k| l[k]).collect()),
            Targets::Values(y) => {
                Targets::Values(Matrix::from_fn(y.rows(), indices.len(), |i, j| y[(i, indices[j])]))
            }
        };
        Batch { inputs, targets }
    }

    /// Hex SHA-256 over the shape, input bits, and targets.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.n_classes as u64).to_le_bytes());
        for x in self.inputs.as_slice() {
            h.update(x.to_le_bytes());
        }
        match &self.targets {
            Targets::Labels(l) => {
                h.update(b"labels");
                for &y in l {
                    h.update((y as u64).to_le_bytes());
                }
            }
            Targets::Values(y) => {
                h.update(b"values");
                for v in y.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Center of class `c`: a fixed unit direction scaled by 2. Uses basis
/// vectors when `n_classes <= dim`, otherwise evenly spaced points on the
/// unit circle in the first two coordinates; in one dimension, evenly
/// spaced points in `[-1, 1]`.
fn blob_center(c: usize, n_classes: usize, dim: usize) -> Vec<f64> {
    let mut mu = vec![0.0; dim];
    if n_classes <= dim {
        mu[c] = 1.0;
    } else if dim >= 2 {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
        mu[0] = angle.cos();
        mu[1] = angle.sin();
    } else {
        mu[0] = -1.0 + 2.0 * c as f64 / (n_classes - 1) as f64;
    }
    mu.iter_mut().for_each(|x| *x *= 2.0);
    mu
}

/// Isotropic Gaussian blobs, `n_per_class` samples per class, stored class by
/// class. Noise has standard deviation `spread` and comes from the seed's
/// data stream.
pub fn make_blobs(
    n_per_class: usize,
    dim: usize,
    n_classes: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || dim == 0 || n_classes == 0 {
        return Err(Error::Config("blob sizes must be positive".into()));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Config(format!("blob spread must be non-negative, got {spread}")));
    }
    let mut rng = Rng::new(seed, Stream::Data);
    let n = n_per_class * n_classes;
    let centers: Vec<Vec<f64>> = (0..n_classes).map(|c| blob_center(c, n_classes, dim)).collect();
    let mut data = Vec::with_capacity(dim * n);
    let mut labels = Vec::with_capacity(n);
    for (c, mu) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mu.iter().map(|m| m + spread * rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_col_major(dim, n, data)?, Targets::Labels(labels), n_classes)
}

fn idx_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(idx_err(
            path,
            format!("truncated header: expected at least {} bytes, found {}", offset + 4, bytes.len()),
        )),
    }
}

/// Parses an IDX file with unsigned-byte payload. Returns the dimension sizes
/// and the payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0, path)?;
    if found != magic {
        return Err(idx_err(
            path,
            format!("bad magic 0x{found:08x} at offset 0 (expected 0x{magic:08x})"),
        ));
    }
    let n_dims = (magic & 0xff) as usize;
    let dims = (0..n_dims)
        .map(|k| read_u32(bytes, 4 + 4 * k, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * n_dims;
    let expected = dims.iter().product::<usize>();
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(idx_err(
            path,
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok((dims, &bytes[header..header + expected]))
}

/// Parses an image/label IDX pair already in memory. Pixels are scaled to
/// `[0, 1]` by dividing by 255.
pub fn parse_idx_pair(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<Dataset> {
    let (img_dims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, images_path)?;
    let (lbl_dims, label_bytes) = parse_idx(labels, IDX_LABELS_MAGIC, labels_path)?;
    let (count, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    if count != lbl_dims[0] {
        return Err(idx_err(
            labels_path,
            format!("image/label count mismatch: {count} images, {} labels", lbl_dims[0]),
        ));
    }
    if count == 0 || rows * cols == 0 {
        return Err(idx_err(images_path, "empty image set"));
    }
    let dim = rows * cols;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Matrix::from_col_major(dim, count, data)?, Targets::Labels(labels), n_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx_pair(&images, &labels, images_path, labels_path)
}
