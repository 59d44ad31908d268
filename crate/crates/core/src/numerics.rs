//! Dense row-major matrices and the handful of statistics every other module
//! leans on.
//!
//! All arithmetic is `f64`. Products accumulate each output entry strictly in
//! order of the shared dimension, so a row of `a.matmul(b)` is bit-identical
//! to the product of that row alone with `b`. Incremental decoding relies on
//! this to reproduce full-sequence logits exactly.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Argument,
            "matrix data has {} entries, expected {rows}x{cols}",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Domain,
            "matrix contains non-finite entries"
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Argument,
            "ragged rows"
        );
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Unchecked constructor for internal results whose length is known.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
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

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            row_times_matrix(self.row(r), rhs, out.row_mut(r));
        }
        out
    }

    /// `selfᵀ · rhs`, used for weight gradients.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "matmul_tn shape mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = rhs.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = out.row_mut(i);
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`, used to push gradients back through a weight.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_nt shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..rhs.rows {
                out.data[r * rhs.rows + c] = dot(a, rhs.row(c));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }
}

/// `out = x · w` for a single row vector. Each output accumulates over the
/// shared dimension in index order.
#[inline]
pub fn row_times_matrix(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let wr = w.row(k);
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += xk * wv;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// A quantile level in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Quantile(f64);

impl Quantile {
    pub const MEDIAN: Quantile = Quantile(0.5);
    pub const Q75: Quantile = Quantile(0.75);

    pub fn new(q: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&q), Argument, "quantile {q} not in [0, 1]");
        Ok(Self(q))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Quantile {
    type Error = Error;
    fn try_from(q: f64) -> Result<Self> {
        Quantile::new(q)
    }
}

impl From<Quantile> for f64 {
    fn from(q: Quantile) -> f64 {
        q.0
    }
}

/// Softmax of a slice with max-subtraction.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    ensure!(!row.is_empty(), Domain, "softmax of empty row");
    ensure!(
        row.iter().all(|v| v.is_finite()),
        Domain,
        "softmax of non-finite row"
    );
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `log softmax(row)[target]`, computed as `x_t - max - ln Σ exp(x - max)`.
pub fn log_softmax_at(row: &[f64], target: usize) -> Result<f64> {
    ensure!(target < row.len(), Argument, "target {target} outside row of {}", row.len());
    ensure!(
        row.iter().all(|v| v.is_finite()),
        Domain,
        "log-softmax of non-finite row"
    );
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(row[target] - max - lse)
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> Result<usize> {
    ensure!(!row.is_empty(), Domain, "argmax of empty row");
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    Ok(best)
}

pub fn softmax_row(m: &Matrix, i: usize) -> Result<Vec<f64>> {
    ensure!(i < m.rows(), Argument, "row {i} out of range for {} rows", m.rows());
    softmax(m.row(i))
}

pub fn argmax_row(m: &Matrix, i: usize) -> Result<usize> {
    ensure!(i < m.rows(), Argument, "row {i} out of range for {} rows", m.rows());
    argmax(m.row(i))
}

/// Empirical quantile with lower interpolation: the sorted value at index
/// `floor(q * (len - 1))`.
pub fn quantile(values: &[f64], q: Quantile) -> Result<f64> {
    ensure!(!values.is_empty(), Domain, "quantile of empty list");
    ensure!(
        values.iter().all(|v| !v.is_nan()),
        Domain,
        "quantile of list containing NaN"
    );
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (q.value() * (sorted.len() - 1) as f64).floor() as usize;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two
/// values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Bootstrap standard error of `mean(a) − mean(b)` for independent samples:
/// each replicate resamples both groups with replacement.
pub fn bootstrap_diff_se(a: &[f64], b: &[f64], replicates: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    ensure!(!a.is_empty() && !b.is_empty(), Argument, "bootstrap needs two nonempty samples");
    ensure!(replicates >= 2, Argument, "bootstrap needs at least two replicates");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |xs: &[f64]| -> f64 {
        (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / xs.len() as f64
    };
    let diffs: Vec<f64> = (0..replicates).map(|_| draw(a) - draw(b)).collect();
    Ok(std_dev(&diffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_flat_row() {
        let p = softmax(&[0.0; 4]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_equal_logits() {
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_value() {
        let m = Matrix::from_rows(&[vec![1.0f64.ln(), 3.0f64.ln()]]).unwrap();
        let p = softmax_row(&m, 0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::Domain(_))));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0]).unwrap(), 1);
        assert_eq!(argmax(&[5.0, 5.0, 1.0]).unwrap(), 0);
        assert!(matches!(argmax(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], Quantile::Q75).unwrap(), 3.0);
        assert_eq!(quantile(&[7.0], Quantile::new(0.3).unwrap()).unwrap(), 7.0);
        assert_eq!(quantile(&[0.0, 100.0], Quantile::new(0.0).unwrap()).unwrap(), 0.0);
        assert_eq!(quantile(&[90.0, 10.0, 20.0], Quantile::Q75).unwrap(), 20.0);
        assert!(quantile(&[], Quantile::MEDIAN).is_err());
        assert!(Quantile::new(1.5).is_err());
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, -1.0], vec![0.0, 3.0]]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab.as_slice(), &[4.0, 7.0, -1.5, 11.5]);
        assert_eq!(a.transpose().matmul_tn(&b), ab);
        assert_eq!(a.matmul_nt(&b.transpose()), ab);
    }

    #[test]
    fn bootstrap_se_tracks_analytic_value() {
        // Two groups of 400 with sd 1 each: se of the difference ≈ sqrt(2/400).
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..400).map(|_| n.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..400).map(|_| n.sample(&mut rng)).collect();
        let se = bootstrap_diff_se(&a, &b, 2000, 7).unwrap();
        let expected = (std_dev(&a).powi(2) / 400.0 + std_dev(&b).powi(2) / 400.0).sqrt();
        assert!((se / expected - 1.0).abs() < 0.1, "{se} vs {expected}");
        assert_eq!(bootstrap_diff_se(&[1.0; 5], &[1.0; 5], 50, 0).unwrap(), 0.0);
        assert!(bootstrap_diff_se(&[], &[1.0], 50, 0).is_err());
    }

    fn finite_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..32)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(row in finite_row(), shift in -1e3f64..1e3) {
            let p = softmax(&row).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn quantile_extremes(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(quantile(&values, Quantile::new(0.0).unwrap()).unwrap(), lo);
            prop_assert_eq!(quantile(&values, Quantile::new(1.0).unwrap()).unwrap(), hi);
        }

        #[test]
        fn argmax_permutation_covariant(mut values in prop::collection::hash_set(-10_000i64..10_000, 1..40), rot in 0usize..40) {
            let v: Vec<f64> = values.drain().map(|x| x as f64).collect();
            let best = argmax(&v).unwrap();
            let k = rot % v.len();
            let mut rotated = v.clone();
            rotated.rotate_left(k);
            let expected = (best + v.len() - k) % v.len();
            prop_assert_eq!(argmax(&rotated).unwrap(), expected);
        }

        #[test]
        fn matmul_rows_are_independent(rows in 1usize..6, inner in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::from_raw(rows, inner, (0..rows * inner).map(|_| rng.random_range(-1.0..1.0)).collect());
            let b = Matrix::from_raw(inner, cols, (0..inner * cols).map(|_| rng.random_range(-1.0..1.0)).collect());
            let full = a.matmul(&b);
            for r in 0..rows {
                let single = Matrix::from_raw(1, inner, a.row(r).to_vec()).matmul(&b);
                prop_assert_eq!(single.row(0), full.row(r));
            }
        }
    }
}
