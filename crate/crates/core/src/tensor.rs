//! Dense row-major `f64` matrices and the handful of kernels the model needs.
//!
//! All products accumulate over the shared dimension in ascending index order,
//! one output row at a time. Computing a single row in isolation therefore gives
//! the same bits as computing it inside a larger product, which is what lets
//! incremental decoding reproduce a full forward pass exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reproducibility seed. Sub-seeds are derived by mixing in a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed(pub u64);

impl Seed {
    pub fn derive(self, tag: u64) -> Seed {
        Seed(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn derive_str(self, tag: &str) -> Seed {
        // FNV-1a, stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.derive(h)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Zeros,
    /// Uniform on `[-1/sqrt(cols), 1/sqrt(cols)]`.
    UniformScaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Matrix::from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "push_row",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(&self.data, self.cols, &other.data, other.cols, &mut out.data);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let bt = other.transpose();
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(&self.data, self.cols, &bt.data, bt.cols, &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let at = self.transpose();
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(&at.data, at.cols, &other.data, other.cols, &mut out.data);
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add_scaled_assign(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..out.rows {
            softmax_in_place(out.row_mut(i));
        }
        out
    }
}

const GEMM_BLOCK: usize = 16;

/// `out = a · b` for row-major `a` (`k` columns) and `b` (`n` columns).
/// Every output is accumulated over `k` in ascending order from zero.
fn gemm(a: &[f64], k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    if k == 0 || n == 0 {
        return;
    }
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        let mut j0 = 0;
        while j0 + GEMM_BLOCK <= n {
            let mut acc = [0.0f64; GEMM_BLOCK];
            for (kk, &av) in a_row.iter().enumerate() {
                let br: &[f64; GEMM_BLOCK] = b[kk * n + j0..kk * n + j0 + GEMM_BLOCK].try_into().expect("block");
                for l in 0..GEMM_BLOCK {
                    acc[l] += av * br[l];
                }
            }
            o_row[j0..j0 + GEMM_BLOCK].copy_from_slice(&acc);
            j0 += GEMM_BLOCK;
        }
        if j0 < n {
            let o = &mut o_row[j0..];
            for (kk, &av) in a_row.iter().enumerate() {
                for (ov, &bv) in o.iter_mut().zip(&b[kk * n + j0..(kk + 1) * n]) {
                    *ov += av * bv;
                }
            }
        }
    }
}

/// `out = row · m`, accumulating over `k` in ascending order.
#[inline]
pub fn row_times_matrix(row: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(row.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.iter_mut().for_each(|v| *v = 0.0);
    for (k, &a) in row.iter().enumerate() {
        let b = m.row(k);
        for (o, &bk) in out.iter_mut().zip(b) {
            *o += a * bk;
        }
    }
}

/// Inner product with four interleaved partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let split = n - n % 4;
    for (x, y) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln Σ exp(x_i)`, stable for large magnitudes.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    m.softmax_rows()
}

pub fn seeded_init(rows: usize, cols: usize, seed: Seed, scheme: InitScheme) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::ZeroDimension("seeded_init"));
    }
    match scheme {
        InitScheme::Zeros => Ok(Matrix::zeros(rows, cols)),
        InitScheme::UniformScaled => {
            let bound = 1.0 / (cols as f64).sqrt();
            let mut rng = seed.rng();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Matrix::new(rows, cols, data)
        }
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p);
        p[i] = orig - eps;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        seeded_init(rows, cols, Seed(seed), InitScheme::UniformScaled).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
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

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = random(4, 4, 1);
        assert_eq!(a.matmul(&Matrix::identity(4)).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = random(8, 8, 2);
        let b = random(8, 8, 3);
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = random(2, 3, 1).matmul(&random(2, 3, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = random(5, 3, 4);
        let b = random(6, 3, 5);
        let c = random(5, 2, 6);
        assert!(a.matmul_t(&b).unwrap().max_abs_diff(&a.matmul(&b.transpose()).unwrap()) < 1e-15);
        assert!(a.t_matmul(&c).unwrap().max_abs_diff(&a.transpose().matmul(&c).unwrap()) < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 103.0]]).unwrap();
        let s = m.softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!(s.get(1, 1) >= 1.0 - 1e-12);
        let r = random(5, 5, 9).scale(10.0).softmax_rows();
        for i in 0..5 {
            assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn seeded_init_contracts() {
        let z = seeded_init(2, 3, Seed(0), InitScheme::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 6]);
        assert_eq!(random(7, 5, 42), random(7, 5, 42));
        assert!(seeded_init(0, 3, Seed(0), InitScheme::Zeros).is_err());

        // Mean of U(-b, b) is 0 with variance b²/3.
        let m = random(16, 8, 11);
        let n = m.data().len() as f64;
        let bound = 1.0 / 8f64.sqrt();
        let mean = m.data().iter().sum::<f64>() / n;
        let se = (bound * bound / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(m.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
        let err = finite_diff_grad(|p| if p[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { coordinate: 1 }));
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn seed_derivation_is_stable_and_distinct() {
        let s = Seed(7);
        assert_eq!(s.derive(3), s.derive(3));
        assert_ne!(s.derive(3), s.derive(4));
        assert_ne!(s.derive_str("a"), s.derive_str("b"));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let a = random(n, m, seed);
            let b = random(m, p, seed + 1);
            let c = random(p, q, seed + 2);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius().max(1e-300);
            prop_assert!(left.max_abs_diff(&right) / scale <= 1e-9);
        }

        #[test]
        fn softmax_rows_are_distributions(row in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let s = Matrix::row_vector(&row).softmax_rows();
            prop_assert!(s.data().iter().all(|v| *v >= 0.0));
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn seeded_init_replays(seed in any::<u64>(), r in 1usize..10, c in 1usize..10) {
            let a: Vec<Matrix> = (0..3).map(|i| seeded_init(r, c, Seed(seed).derive(i), InitScheme::UniformScaled).unwrap()).collect();
            let b: Vec<Matrix> = (0..3).map(|i| seeded_init(r, c, Seed(seed).derive(i), InitScheme::UniformScaled).unwrap()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
