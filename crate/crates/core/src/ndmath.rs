//! Dense row-major matrices and a seeded, splittable PRNG.
//!
//! Every reduction runs in a fixed order: `matmul` accumulates each output
//! entry over the inner dimension from left to right starting at `0.0`, so its
//! result is bit-identical to a naive triple loop regardless of how the kernel
//! tiles the work. Nothing in here runs in parallel.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!("matrix data length {} does not match {rows}x{cols}", data.len())));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Config("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        const TILE: usize = 32;
        for r0 in (0..self.rows).step_by(TILE) {
            for c0 in (0..self.cols).step_by(TILE) {
                for r in r0..(r0 + TILE).min(self.rows) {
                    for c in c0..(c0 + TILE).min(self.cols) {
                        out.data[c * self.rows + r] = self.data[r * self.cols + c];
                    }
                }
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Mat { rows: indices.len(), cols: self.cols, data }
    }

    /// Copies the half-open column range `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Mat {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Mat { rows: self.rows, cols: w, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols, "bias length mismatch");
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += *b;
            }
        }
    }

    /// Column sums, accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += *x;
            }
        }
        out
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::Config(format!(
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;

/// `c = a · b` for row-major `a` (m×k), `b` (k×n), `c` (m×n).
///
/// Tiles over rows, columns and the inner dimension, but every `c[i][j]`
/// still sees its k terms added one at a time in ascending order.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut panel = vec![0.0f64; KC * NR];
    for k0 in (0..k).step_by(KC) {
        let kc = (k0 + KC).min(k) - k0;
        let mut j0 = 0;
        while j0 + NR <= n {
            for kk in 0..kc {
                let src = (k0 + kk) * n + j0;
                panel[kk * NR..(kk + 1) * NR].copy_from_slice(&b[src..src + NR]);
            }
            let mut i0 = 0;
            while i0 + MR <= m {
                kernel_full(a, &panel[..kc * NR], c, i0, j0, k0, kc, k, n);
                i0 += MR;
            }
            for i in i0..m {
                kernel_row(a, &panel[..kc * NR], c, i, j0, k0, kc, k, n);
            }
            j0 += NR;
        }
        if j0 < n {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for kk in 0..kc {
                    let av = a[i * k + k0 + kk];
                    let brow = &b[(k0 + kk) * n..(k0 + kk + 1) * n];
                    for j in j0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_full(
    a: &[f64],
    panel: &[f64],
    c: &mut [f64],
    i0: usize,
    j0: usize,
    k0: usize,
    kc: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, accr) in acc.iter_mut().enumerate() {
        accr.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
    }
    let a0 = &a[i0 * k + k0..i0 * k + k0 + kc];
    let a1 = &a[(i0 + 1) * k + k0..(i0 + 1) * k + k0 + kc];
    let a2 = &a[(i0 + 2) * k + k0..(i0 + 2) * k + k0 + kc];
    let a3 = &a[(i0 + 3) * k + k0..(i0 + 3) * k + k0 + kc];
    for kk in 0..kc {
        let bp: &[f64; NR] = panel[kk * NR..(kk + 1) * NR].try_into().unwrap();
        let av = [a0[kk], a1[kk], a2[kk], a3[kk]];
        for r in 0..MR {
            for j in 0..NR {
                acc[r][j] += av[r] * bp[j];
            }
        }
    }
    for (r, accr) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(accr);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_row(a: &[f64], panel: &[f64], c: &mut [f64], i: usize, j0: usize, k0: usize, kc: usize, k: usize, n: usize) {
    let mut acc = [0.0f64; NR];
    acc.copy_from_slice(&c[i * n + j0..i * n + j0 + NR]);
    let arow = &a[i * k + k0..i * k + k0 + kc];
    for kk in 0..kc {
        let bp: &[f64; NR] = panel[kk * NR..(kk + 1) * NR].try_into().unwrap();
        let av = arow[kk];
        for j in 0..NR {
            acc[j] += av * bp[j];
        }
    }
    c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
}

/// Deterministic xoshiro256** generator seeded through SplitMix64.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    s: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a, used only to turn split labels into seed material.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [splitmix64(&mut sm), splitmix64(&mut sm), splitmix64(&mut sm), splitmix64(&mut sm)];
        Rng { seed, s }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream that depends only on this generator's seed and `label`,
    /// not on how far the parent has advanced.
    pub fn split(&self, label: &str) -> Rng {
        let mut sm = self.seed ^ fnv1a(label.as_bytes()).rotate_left(17);
        let child_seed = splitmix64(&mut sm) ^ splitmix64(&mut sm).rotate_left(32);
        Rng::new(child_seed)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in `[0, bound)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fills `out` with draws on `[lo, hi)`; one draw per element.
    pub(crate) fn fill_uniform(&mut self, out: &mut [f64], lo: f64, hi: f64) {
        let width = hi - lo;
        for x in out.iter_mut() {
            let v = lo + width * self.next_f64();
            // rounding can land exactly on `hi`
            *x = if v < hi { v } else { prev_float(hi) };
        }
    }
}

fn prev_float(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x == 0.0 {
        -f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

/// `n` i.i.d. draws on `[lo, hi)` as a 1×n matrix.
pub fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Result<Mat> {
    check_range(lo, hi)?;
    let mut m = Mat::zeros(1, n);
    rng.fill_uniform(&mut m.data, lo, hi);
    Ok(m)
}

pub(crate) fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("invalid uniform range [{lo}, {hi})")));
    }
    Ok(())
}

/// Fisher–Yates permutation of `0..n`.
pub fn shuffle_indices(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Sequential dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Mat {
        let v = uniform(rng, r * c, -1.0, 1.0).unwrap().into_vec();
        Mat::from_vec(r, c, v).unwrap()
    }

    #[test]
    fn identity_times_m() {
        let mut rng = Rng::new(1);
        let m = random(&mut rng, 3, 5);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_hand_product() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matches_naive_bit_exact() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        assert_eq!(matmul(&a, &b).unwrap(), naive(&a, &b));
        // shapes that exercise full tiles, edge rows/cols and several k panels
        for &(m, k, n) in &[(9, 300, 37), (4, 16, 16), (13, 600, 33), (1, 1, 1)] {
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            assert_eq!(matmul(&a, &b).unwrap().data(), naive(&a, &b).data(), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn associative_on_small_integers() {
        let mut rng = Rng::new(3);
        let int = |rng: &mut Rng, r, c| {
            let v = (0..r * c).map(|_| rng.below(7) as f64 - 3.0).collect();
            Mat::from_vec(r, c, v).unwrap()
        };
        let a = int(&mut rng, 4, 6);
        let b = int(&mut rng, 6, 5);
        let c = int(&mut rng, 5, 3);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn uniform_is_deterministic_and_in_range() {
        let a = uniform(&mut Rng::new(42), 1000, -2.0, 3.0).unwrap();
        let b = uniform(&mut Rng::new(42), 1000, -2.0, 3.0).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&x| (-2.0..3.0).contains(&x)));
    }

    #[test]
    fn uniform_advances_by_n_draws() {
        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(5);
        uniform(&mut r1, 17, 0.0, 1.0).unwrap();
        for _ in 0..17 {
            r2.next_u64();
        }
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn uniform_mean_lln() {
        let m = uniform(&mut Rng::new(11), 100_000, 0.0, 1.0).unwrap();
        let mean = m.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn uniform_degenerate_range() {
        assert!(uniform(&mut Rng::new(0), 3, 1.0, 1.0).is_err());
        assert!(uniform(&mut Rng::new(0), 3, 2.0, 1.0).is_err());
    }

    #[test]
    fn split_depends_on_seed_and_label_only() {
        let root = Rng::new(9);
        let mut advanced = root.clone();
        advanced.next_u64();
        assert_eq!(root.split("noise").next_u64(), advanced.split("noise").next_u64());
        assert_ne!(root.split("noise").next_u64(), root.split("init").next_u64());
        assert_ne!(Rng::new(1).split("x").next_u64(), Rng::new(2).split("x").next_u64());
    }

    #[test]
    fn shuffle_small_cases() {
        assert_eq!(shuffle_indices(&mut Rng::new(0), 1), vec![0]);
        let mut p = shuffle_indices(&mut Rng::new(0), 500);
        p.sort_unstable();
        assert_eq!(p, (0..500).collect::<Vec<_>>());
        let a = shuffle_indices(&mut Rng::new(1), 1000);
        let b = shuffle_indices(&mut Rng::new(2), 1000);
        assert_ne!(a, b);
    }

    #[test]
    fn shuffle_chi_square_n4() {
        // 24 permutations, 10^4 trials; chi-square with 23 dof, 0.999 quantile = 49.728
        let mut rng = Rng::new(2024);
        let mut counts = std::collections::HashMap::new();
        let trials = 10_000;
        for _ in 0..trials {
            *counts.entry(shuffle_indices(&mut rng, 4)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        let expected = trials as f64 / 24.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 49.728, "chi2 = {chi2}");
    }

    #[test]
    fn transpose_and_helpers() {
        let m = Mat::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let t = m.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(m.column_sums(), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.columns(1, 3).data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(m.gather_rows(&[1, 0]).data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }
}
