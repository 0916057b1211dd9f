//! MNIST IDX ingestion, the seeded train/audit split, uniform-noise inputs and
//! shuffled mini-batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::ndmath::{self, Mat, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_SIZE: usize = 50_000;
pub const AUDIT_SIZE: usize = 10_000;
pub const NOISE_SIZE: usize = 60_000;

/// Canonical file names and their uncompressed byte lengths.
pub const MNIST_FILES: [(&str, u64); 4] = [
    ("train-images-idx3-ubyte", 16 + 60_000 * 784),
    ("train-labels-idx1-ubyte", 8 + 60_000),
    ("t10k-images-idx3-ubyte", 16 + 10_000 * 784),
    ("t10k-labels-idx1-ubyte", 8 + 10_000),
];

fn read_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse { field, detail: "header truncated".into() })
}

/// Parses an IDX3 image file; pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Mat> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            field: "magic",
            detail: format!("expected 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n = read_u32(bytes, 4, "count")? as usize;
    let rows = read_u32(bytes, 8, "rows")? as usize;
    let cols = read_u32(bytes, 12, "cols")? as usize;
    if rows != SIDE {
        return Err(Error::Parse { field: "rows", detail: format!("expected 28, found {rows}") });
    }
    if cols != SIDE {
        return Err(Error::Parse { field: "cols", detail: format!("expected 28, found {cols}") });
    }
    let payload = &bytes[16..];
    if payload.len() != n * PIXELS {
        return Err(Error::Parse {
            field: "payload",
            detail: format!("expected {} bytes for {n} images, found {}", n * PIXELS, payload.len()),
        });
    }
    let data = payload.iter().map(|&p| p as f64 / 255.0).collect();
    Mat::from_vec(n, PIXELS, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            field: "magic",
            detail: format!("expected 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n = read_u32(bytes, 4, "count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Parse { field: "payload", detail: format!("expected {n} labels, found {}", payload.len()) });
    }
    if let Some((i, &l)) = payload.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
        return Err(Error::Parse { field: "label", detail: format!("label {l} at index {i} exceeds 9") });
    }
    Ok(payload.to_vec())
}

/// Inverse of [`parse_idx_images`] for pixel values on the k/255 grid.
pub fn encode_idx_images(images: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.data().len());
    for v in [IMAGE_MAGIC, images.rows() as u32, SIDE as u32, SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads a file, transparently gunzipping it when it carries the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Mat,
    pub labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(images: Mat, labels: Vec<u8>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Input(format!("{} images but {} labels", images.rows(), labels.len())));
        }
        if images.cols() != PIXELS {
            return Err(Error::Input(format!("expected {PIXELS} pixel columns, found {}", images.cols())));
        }
        if !images.data().iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Input("pixel outside [0, 1]".into()));
        }
        if labels.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Input("label outside 0..=9".into()));
        }
        Ok(LabeledDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseDataset {
    pub images: Mat,
}

#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: LabeledDataset,
    pub audit: LabeledDataset,
    pub train_indices: Vec<usize>,
    pub audit_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn locate(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))].into_iter().find(|p| p.is_file())
}

/// Loads the four canonical MNIST files (plain or gzipped) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    let load = |idx: usize| -> Result<Vec<u8>> {
        let name = MNIST_FILES[idx].0;
        let path = locate(dir, name).ok_or_else(|| Error::Setup(format!("{name} not found in {}", dir.display())))?;
        read_maybe_gz(&path)
    };
    let train = LabeledDataset::new(parse_idx_images(&load(0)?)?, parse_idx_labels(&load(1)?)?)?;
    let test = LabeledDataset::new(parse_idx_images(&load(2)?)?, parse_idx_labels(&load(3)?)?)?;
    Ok(Mnist { train, test })
}

/// Checks that `dir` holds all four files with canonical uncompressed lengths.
pub fn verify_mnist_dir(dir: &Path) -> Result<()> {
    for (name, expected) in MNIST_FILES {
        let path = locate(dir, name).ok_or_else(|| Error::Setup(format!("{name} not found in {}", dir.display())))?;
        let len = if path.extension().is_some_and(|e| e == "gz") {
            read_maybe_gz(&path)?.len() as u64
        } else {
            fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len()
        };
        if len != expected {
            return Err(Error::Integrity { path, detail: format!("expected {expected} bytes, found {len}") });
        }
    }
    Ok(())
}

/// Uniformly random disjoint 50k/10k partition of the 60k training images.
pub fn split_train_audit(full: &LabeledDataset, rng: &mut Rng) -> Result<SplitPair> {
    if full.len() != TRAIN_SIZE + AUDIT_SIZE {
        return Err(Error::Config(format!(
            "train/audit split needs {} rows, found {}",
            TRAIN_SIZE + AUDIT_SIZE,
            full.len()
        )));
    }
    let perm = ndmath::shuffle_indices(rng, full.len());
    let train_indices = perm[..TRAIN_SIZE].to_vec();
    let audit_indices = perm[TRAIN_SIZE..].to_vec();
    Ok(SplitPair {
        train: full.subset(&train_indices),
        audit: full.subset(&audit_indices),
        train_indices,
        audit_indices,
    })
}

/// 60,000 noise images with pixels i.i.d. uniform on `[0, 1)`.
pub fn gen_noise(rng: &mut Rng) -> NoiseDataset {
    gen_noise_in(rng, NOISE_SIZE, 0.0, 1.0).expect("unit range is valid")
}

pub fn gen_noise_in(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Result<NoiseDataset> {
    ndmath::check_range(lo, hi)?;
    let mut images = Mat::zeros(n, PIXELS);
    rng.fill_uniform(images.data_mut(), lo, hi);
    Ok(NoiseDataset { images })
}

/// Anything that can be served in row batches.
pub trait BatchSource {
    fn images(&self) -> &Mat;
    fn labels(&self) -> Option<&[u8]> {
        None
    }
}

impl BatchSource for LabeledDataset {
    fn images(&self) -> &Mat {
        &self.images
    }
    fn labels(&self) -> Option<&[u8]> {
        Some(&self.labels)
    }
}

impl BatchSource for NoiseDataset {
    fn images(&self) -> &Mat {
        &self.images
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Mat,
    pub labels: Option<Vec<u8>>,
    pub indices: Vec<usize>,
}

/// One epoch over a dataset in a fixed order. The final batch may be short.
pub struct BatchIter<'a, D: BatchSource> {
    data: &'a D,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a, D: BatchSource> BatchIter<'a, D> {
    pub fn new(data: &'a D, batch_size: usize, order: Vec<usize>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if order.len() != data.images().rows() {
            return Err(Error::Config("batch order length does not match dataset".into()));
        }
        Ok(BatchIter { data, batch_size, order, cursor: 0 })
    }

    /// Fresh epoch in a shuffled order drawn from `rng`.
    pub fn shuffled(data: &'a D, batch_size: usize, rng: &mut Rng) -> Result<Self> {
        let order = ndmath::shuffle_indices(rng, data.images().rows());
        Self::new(data, batch_size, order)
    }

    pub fn sequential(data: &'a D, batch_size: usize) -> Result<Self> {
        Self::new(data, batch_size, (0..data.images().rows()).collect())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// `None` marks the end of the epoch.
    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let images = self.data.images().gather_rows(&indices);
        let labels = self.data.labels().map(|l| indices.iter().map(|&i| l[i]).collect());
        Some(Batch { images, labels, indices })
    }
}

impl<D: BatchSource> Iterator for BatchIter<'_, D> {
    type Item = Batch;
    fn next(&mut self) -> Option<Batch> {
        self.next_batch()
    }
}
