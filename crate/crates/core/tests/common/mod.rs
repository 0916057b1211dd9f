#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sgl_core::dataio::{LabeledDataset, NoiseDataset, SplitPair};
use sgl_core::mlpnet::{self, MlpParams, BLOCK_NAMES};
use sgl_core::ndmath::{self, shuffle_indices, Mat, Rng};
use sgl_core::objectives::{self, LossOut};
use sgl_core::trainloop::SeedData;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// `$SGL_DATA_DIR`, else `<workspace>/data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("SGL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn random_images(rng: &mut Rng, n: usize) -> Mat {
    let v = ndmath::uniform(rng, n * 784, 0.0, 1.0).unwrap().into_vec();
    Mat::from_vec(n, 784, v).unwrap()
}

pub fn random_labeled(rng: &mut Rng, n: usize) -> LabeledDataset {
    let images = random_images(rng, n);
    let labels = (0..n).map(|_| rng.below(10) as u8).collect();
    LabeledDataset::new(images, labels).unwrap()
}

/// Synthetic stand-in for a seed's data: small audit and noise sets.
pub fn synthetic_seed(seed: u64, audit: usize, noise: usize) -> SeedData {
    let mut rng = Rng::new(seed).split("synthetic");
    let train = random_labeled(&mut rng, 16);
    let audit = random_labeled(&mut rng, audit);
    SeedData {
        split: SplitPair { train, audit, train_indices: Vec::new(), audit_indices: Vec::new() },
        noise: NoiseDataset { images: random_images(&mut rng, noise) },
    }
}

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const PROBES: usize = 100;

pub fn params(label: &str) -> MlpParams {
    MlpParams::init(&mut Rng::new(11).split(label))
}

/// Perturb the biases away from zero so their gradients are exercised in a
/// generic position.
pub fn jitter_biases(p: &mut MlpParams, rng: &mut Rng) {
    for v in p.b1.iter_mut().chain(p.b2.iter_mut()).chain(p.b3.iter_mut()) {
        *v = 0.1 * (rng.next_f64() - 0.5);
    }
}

/// Worst relative error over the probed coordinates, and the number probed.
pub fn fd_check(name: &str, p: &MlpParams, x: &Mat, loss: &dyn Fn(&Mat) -> LossOut) -> (f64, usize) {
    let cache = mlpnet::forward(p, x).unwrap();
    let out = loss(&cache.logits);
    let grad = mlpnet::backward(p, &cache, &out.dlogits).unwrap();
    let value = |q: &MlpParams| loss(&mlpnet::forward(q, x).unwrap().logits).value;

    let mut rng = Rng::new(5).split(name);
    let mut worst = 0.0f64;
    let mut probed = 0;
    for (b, block) in grad.blocks().iter().enumerate() {
        let order = shuffle_indices(&mut rng, block.len());
        let probes = &order[..PROBES.min(block.len())];
        assert!(probes.len() >= PROBES || probes.len() == block.len());
        for &i in probes {
            let mut plus = p.clone();
            plus.blocks_mut()[b][i] += H;
            let mut minus = p.clone();
            minus.blocks_mut()[b][i] -= H;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
            let analytic = block[i];
            let scale = analytic.abs().max(numeric.abs());
            // Both sides vanishing (e.g. a dead unit) counts as agreement.
            let rel = if scale < 1e-11 { 0.0 } else { (analytic - numeric).abs() / scale };
            worst = worst.max(rel);
            if rel >= TOL {
                eprintln!("{name} {}[{i}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}", BLOCK_NAMES[b]);
            }
            probed += 1;
        }
    }
    (worst, probed)
}

pub fn inputs() -> Mat {
    random_images(&mut Rng::new(3).split("fd-inputs"), 6)
}

/// Probes CE, KL (T = 1 and 2) and the liminal term; name → (worst, probed).
pub fn fd_all_objectives() -> Vec<(String, f64, usize)> {
    let x = inputs();
    let mut out = Vec::new();
    let mut p = params("ce");
    jitter_biases(&mut p, &mut Rng::new(1));
    let labels = [3u8, 0, 9, 9, 1, 7];
    let (w, n) = fd_check("ce", &p, &x, &|l| objectives::cross_entropy_class(l, &labels).unwrap());
    out.push(("ce".to_string(), w, n));

    let mut p = params("kl-student");
    jitter_biases(&mut p, &mut Rng::new(2));
    let t_logits = mlpnet::forward(&params("kl-teacher"), &x).unwrap().logits;
    for t in [1.0, 2.0] {
        let name = format!("kl-T{t}");
        let (w, n) = fd_check(&name, &p, &x, &|l| objectives::kl_aux(&t_logits, l, t).unwrap());
        out.push((name, w, n));
    }

    let mut p = params("lim-student");
    jitter_biases(&mut p, &mut Rng::new(4));
    let b_logits = mlpnet::forward(&params("lim-base"), &x).unwrap().logits;
    let (w, n) = fd_check("liminal", &p, &x, &|l| objectives::liminal_reg(&b_logits, l, 2.0, 0.7).unwrap());
    out.push(("liminal".to_string(), w, n));
    out
}
