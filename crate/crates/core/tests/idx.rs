//! IDX parsing on small fixtures and, when available, the canonical files.

mod common;

use std::fs;

use sgl_core::dataio::{self, MNIST_FILES};
use sgl_core::Error;

#[test]
fn fixture_round_trip_is_bit_exact() {
    let dir = common::fixtures();
    let img_bytes = fs::read(dir.join("tiny-images-idx3-ubyte")).unwrap();
    let lab_bytes = fs::read(dir.join("tiny-labels-idx1-ubyte")).unwrap();
    let images = dataio::parse_idx_images(&img_bytes).unwrap();
    let labels = dataio::parse_idx_labels(&lab_bytes).unwrap();
    assert_eq!(images.shape(), (8, 784));
    assert_eq!(labels, [5, 0, 4, 1, 9, 2, 1, 3]);
    assert_eq!(dataio::encode_idx_images(&images), img_bytes);
    assert_eq!(dataio::encode_idx_labels(&labels), lab_bytes);
    assert!(images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn gzip_fixtures_match_plain() {
    let dir = common::fixtures();
    for name in ["tiny-images-idx3-ubyte", "tiny-labels-idx1-ubyte"] {
        let plain = dataio::read_maybe_gz(&dir.join(name)).unwrap();
        let gz = dataio::read_maybe_gz(&dir.join(format!("{name}.gz"))).unwrap();
        assert_eq!(plain, gz, "{name}");
    }
}

#[test]
fn truncated_directory_is_an_integrity_error() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, len) in MNIST_FILES {
        fs::write(tmp.path().join(name), vec![0u8; len as usize]).unwrap();
    }
    dataio::verify_mnist_dir(tmp.path()).unwrap();
    let victim = tmp.path().join(MNIST_FILES[2].0);
    fs::write(&victim, [0u8; 100]).unwrap();
    match dataio::verify_mnist_dir(tmp.path()) {
        Err(Error::Integrity { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn canonical_mnist_when_present() {
    let dir = common::data_dir();
    if dataio::verify_mnist_dir(&dir).is_err() {
        eprintln!("skipping: no MNIST under {}", dir.display());
        return;
    }
    let m = dataio::load_mnist(&dir).unwrap();
    assert_eq!((m.train.len(), m.test.len()), (60_000, 10_000));
}
