//! The 784-256-256-13 ReLU MLP: initialization, forward pass, backprop to
//! full parameter gradients, flattening and checkpoints.
//!
//! Logit columns 0..10 are the digit classes; 10..13 are the auxiliary
//! ("no-class") logits.

use std::fs;
use std::path::Path;

use crate::dataio::{BatchIter, LabeledDataset};
use crate::error::{Error, Result};
use crate::gradsurgery::FlatGrad;
use crate::ndmath::{matmul, Mat, Rng};

pub const INPUT: usize = 784;
pub const HIDDEN: usize = 256;
pub const CLASS_LOGITS: usize = 10;
pub const AUX_LOGITS: usize = 3;
pub const OUTPUT: usize = CLASS_LOGITS + AUX_LOGITS;
pub const NUM_PARAMS: usize = INPUT * HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN * OUTPUT + OUTPUT;

/// Weights and biases. Gradients use the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w3: Mat,
    pub b3: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 6] = ["W1", "b1", "W2", "b2", "W3", "b3"];

impl MlpParams {
    pub fn zeros() -> Self {
        MlpParams {
            w1: Mat::zeros(INPUT, HIDDEN),
            b1: vec![0.0; HIDDEN],
            w2: Mat::zeros(HIDDEN, HIDDEN),
            b2: vec![0.0; HIDDEN],
            w3: Mat::zeros(HIDDEN, OUTPUT),
            b3: vec![0.0; OUTPUT],
        }
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(rng: &mut Rng) -> Self {
        let mut p = MlpParams::zeros();
        for w in [&mut p.w1, &mut p.w2, &mut p.w3] {
            let bound = (6.0 / w.rows() as f64).sqrt();
            rng.fill_uniform(w.data_mut(), -bound, bound);
        }
        p
    }

    /// Parameter blocks in canonical order W1, b1, W2, b2, W3, b3.
    pub fn blocks(&self) -> [&[f64]; 6] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2, self.w3.data(), &self.b3]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
        [self.w1.data_mut(), &mut self.b1, self.w2.data_mut(), &mut self.b2, self.w3.data_mut(), &mut self.b3]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> FlatGrad {
        let mut v = Vec::with_capacity(NUM_PARAMS);
        for b in self.blocks() {
            v.extend_from_slice(b);
        }
        FlatGrad::new(v)
    }

    pub fn unflatten(flat: &FlatGrad) -> Result<Self> {
        if flat.len() != NUM_PARAMS {
            return Err(Error::Internal(format!("flat vector has {} entries, expected {NUM_PARAMS}", flat.len())));
        }
        let mut p = MlpParams::zeros();
        let mut offset = 0;
        for block in p.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat.as_slice()[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * NUM_PARAMS);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(NUM_PARAMS as u64).to_le_bytes());
        for b in self.blocks() {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Parse { field: "checkpoint", detail };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if count != NUM_PARAMS || bytes.len() != 20 + 8 * count {
            return Err(bad(format!("expected {NUM_PARAMS} parameters, header says {count}")));
        }
        let values = bytes[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        MlpParams::unflatten(&FlatGrad::new(values))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        MlpParams::from_checkpoint_bytes(&bytes)
    }
}

/// File header: 8-byte magic, u32 version, u64 parameter count (all little-endian).
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGLMLP\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<'a> {
    pub input: &'a Mat,
    pub z1: Mat,
    pub h1: Mat,
    pub z2: Mat,
    pub h2: Mat,
    pub logits: Mat,
}

impl ForwardCache<'_> {
    pub fn view(&self) -> LogitsView<'_> {
        LogitsView { logits: &self.logits }
    }
}

/// Splits a b×13 logit matrix into its class and auxiliary columns.
#[derive(Clone, Copy, Debug)]
pub struct LogitsView<'a> {
    pub logits: &'a Mat,
}

impl LogitsView<'_> {
    pub fn class(&self) -> Mat {
        self.logits.columns(0, CLASS_LOGITS)
    }

    pub fn aux(&self) -> Mat {
        self.logits.columns(CLASS_LOGITS, OUTPUT)
    }
}

fn relu(z: &Mat) -> Mat {
    let data = z.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Mat::from_vec(z.rows(), z.cols(), data).expect("same shape")
}

pub fn forward<'a>(p: &MlpParams, x: &'a Mat) -> Result<ForwardCache<'a>> {
    if x.cols() != INPUT {
        return Err(Error::Input(format!("expected {INPUT} input columns, found {}", x.cols())));
    }
    if !x.all_finite() {
        return Err(Error::Input("non-finite input".into()));
    }
    let mut z1 = matmul(x, &p.w1)?;
    z1.add_row_vector(&p.b1);
    let h1 = relu(&z1);
    let mut z2 = matmul(&h1, &p.w2)?;
    z2.add_row_vector(&p.b2);
    let h2 = relu(&z2);
    let mut logits = matmul(&h2, &p.w3)?;
    logits.add_row_vector(&p.b3);
    Ok(ForwardCache { input: x, z1, h1, z2, h2, logits })
}

/// Gates `grad` by the ReLU derivative at `z` (zero at `z == 0`).
fn relu_backward(grad: &mut Mat, z: &Mat) {
    for (g, &zv) in grad.data_mut().iter_mut().zip(z.data()) {
        if zv <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Gradient of the scalar loss whose logit gradient is `dlogits`.
pub fn backward(p: &MlpParams, cache: &ForwardCache<'_>, dlogits: &Mat) -> Result<MlpParams> {
    if dlogits.shape() != cache.logits.shape() {
        return Err(Error::Internal(format!(
            "logit gradient shape {:?} does not match logits {:?}",
            dlogits.shape(),
            cache.logits.shape()
        )));
    }
    let w3 = matmul(&cache.h2.transpose(), dlogits)?;
    let b3 = dlogits.column_sums();
    let mut dz2 = matmul(dlogits, &p.w3.transpose())?;
    relu_backward(&mut dz2, &cache.z2);
    let w2 = matmul(&cache.h1.transpose(), &dz2)?;
    let b2 = dz2.column_sums();
    let mut dz1 = matmul(&dz2, &p.w2.transpose())?;
    relu_backward(&mut dz1, &cache.z1);
    let w1 = matmul(&cache.input.transpose(), &dz1)?;
    let b1 = dz1.column_sums();
    Ok(MlpParams { w1, b1, w2, b2, w3, b3 })
}

/// Logits for `x`, evaluated in row chunks to bound memory.
pub fn logits_chunked(p: &MlpParams, x: &Mat, chunk: usize) -> Result<Mat> {
    let mut out = Vec::with_capacity(x.rows() * OUTPUT);
    for start in (0..x.rows()).step_by(chunk.max(1)) {
        let end = (start + chunk).min(x.rows());
        let rows: Vec<usize> = (start..end).collect();
        let part = x.gather_rows(&rows);
        out.extend_from_slice(forward(p, &part)?.logits.data());
    }
    Mat::from_vec(x.rows(), OUTPUT, out)
}

/// Index of the largest class logit per row; ties go to the lower index.
pub fn predict_classes(logits: &Mat) -> Vec<u8> {
    (0..logits.rows())
        .map(|r| {
            let row = &logits.row(r)[..CLASS_LOGITS];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Fraction of `data` whose argmax class logit equals the label.
pub fn class_accuracy(p: &MlpParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for batch in BatchIter::sequential(data, 2000)? {
        let cache = forward(p, &batch.images)?;
        let preds = predict_classes(&cache.logits);
        let labels = batch.labels.expect("labeled");
        correct += preds.iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
