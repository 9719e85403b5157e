//! Dense linear algebra, deterministic random streams, and finite-difference
//! utilities shared by the rest of the crate.
//!
//! Everything here is 64-bit: the oracle tolerances used throughout the test
//! suites (1e-8 residuals, 1e-4 gradient checks) are not reachable in f32.

mod rng;

pub use rng::{substream_seed, RngStream};

use std::fmt;

/// Errors raised by the numeric kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// A pivot went non-positive during Cholesky factorization. The matrix is
    /// not positive-definite; callers typically respond by increasing the
    /// diagonal ridge and retrying.
    NotPositiveDefinite { pivot: usize },
    /// A probed function value was NaN or infinite.
    NonFiniteValue { context: &'static str },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::NotPositiveDefinite { pivot } => {
                write!(f, "matrix is not positive-definite (pivot {pivot})")
            }
            NumericsError::NonFiniteValue { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
        }
    }
}

impl std::error::Error for NumericsError {}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a flat row-major buffer. Panics if the length disagrees.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "at least one row required");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
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
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`, shapes (m x k)(k x n).
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * n..(l + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `self * other^T`, shapes (m x k)(n x k).
    pub fn matmul_transpose_b(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_transpose_b shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a_row[l] * b_row[l];
                }
                out.data[i * n + j] = acc;
            }
        }
        out
    }

    /// `self^T * other`, shapes (k x m)(k x n).
    pub fn matmul_transpose_a(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_transpose_a shape mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for l in 0..k {
            let a_row = &self.data[l * m..(l + 1) * m];
            let b_row = &other.data[l * n..(l + 1) * n];
            for i in 0..m {
                let a = a_row[i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Sum of each column, as a vector of length `cols`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        out
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`NumericsError::NotPositiveDefinite`] as soon as a pivot drops
/// to zero or below, which is the signal the loss layer uses to escalate its
/// covariance ridge.
pub fn cholesky_factor(a: &Mat) -> Result<Mat, NumericsError> {
    assert_eq!(a.rows(), a.cols(), "cholesky needs a square matrix");
    let n = a.rows();
    for i in 0..n {
        for j in 0..i {
            assert!(
                (a.at(i, j) - a.at(j, i)).abs() <= 1e-9 * (1.0 + a.at(i, j).abs()),
                "cholesky needs a symmetric matrix"
            );
        }
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if d <= 0.0 {
            return Err(NumericsError::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solve `A x = b` given the lower factor `L` with `A = L L^T`.
pub fn cholesky_solve_factored(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n, "dimension mismatch");
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.at(i, k) * y[k];
        }
        y[i] = s / l.at(i, i);
    }
    // backward: L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.at(k, i) * x[k];
        }
        x[i] = s / l.at(i, i);
    }
    x
}

/// Solve `A x = b` for symmetric positive-definite `A`.
pub fn cholesky_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let l = cholesky_factor(a)?;
    Ok(cholesky_solve_factored(&l, b))
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFiniteValue { context: "finite difference probe" });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain Gaussian elimination with partial pivoting; the independent
    /// check for the Cholesky path.
    fn gaussian_solve(a: &Mat, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut aug = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = a.at(i, j);
            }
            aug[i][n] = b[i];
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())).unwrap();
            aug.swap(col, piv);
            for r in (col + 1)..n {
                let f = aug[r][col] / aug[col][col];
                for c in col..=n {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = aug[i][n];
            for j in (i + 1)..n {
                s -= aug[i][j] * x[j];
            }
            x[i] = s / aug[i][i];
        }
        x
    }

    fn random_spd(n: usize, rng: &mut RngStream) -> Mat {
        let g = Mat::from_fn(n, n, |_, _| rng.next_uniform() * 2.0 - 1.0);
        let mut a = g.matmul_transpose_b(&g);
        for i in 0..n {
            let v = a.at(i, i) + 0.5;
            a.set(i, i, v);
        }
        a
    }

    #[test]
    fn cholesky_diagonal_system() {
        let a = Mat::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]);
        let x = cholesky_solve(&a, &[8.0, 27.0]).unwrap();
        assert_eq!(x, vec![2.0, 3.0]);
    }

    #[test]
    fn cholesky_identity_system() {
        let a = Mat::identity(3);
        let x = cholesky_solve(&a, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn cholesky_matches_gaussian_elimination() {
        let mut rng = RngStream::new(42);
        let a = random_spd(5, &mut rng);
        let b: Vec<f64> = (0..5).map(|_| rng.next_uniform() * 2.0 - 1.0).collect();
        let x = cholesky_solve(&a, &b).unwrap();
        let x_ref = gaussian_solve(&a, &b);
        for (u, v) in x.iter().zip(&x_ref) {
            assert!((u - v).abs() <= 1e-10, "{u} vs {v}");
        }
        // residual bound from the contract
        let binf = b.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..5 {
            let r = dot(a.row(i), &x) - b[i];
            assert!(r.abs() <= 1e-8 * (1.0 + binf));
        }
    }

    #[test]
    fn cholesky_recovers_known_solution_up_to_dim_64() {
        let mut rng = RngStream::new(7);
        for &n in &[2usize, 8, 17, 33, 64] {
            let a = random_spd(n, &mut rng);
            let x_true: Vec<f64> = (0..n).map(|_| rng.next_uniform() * 4.0 - 2.0).collect();
            let b: Vec<f64> = (0..n).map(|i| dot(a.row(i), &x_true)).collect();
            let x = cholesky_solve(&a, &b).unwrap();
            let num: f64 = x.iter().zip(&x_true).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            let den: f64 = x_true.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num <= 1e-8 * den, "dim {n}: relative error {}", num / den);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        match cholesky_factor(&a) {
            Err(NumericsError::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn finite_difference_quadratic() {
        let f = |x: &[f64]| x[0] * x[0];
        let g = finite_difference_gradient(f, &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_constant_is_zero() {
        let f = |_: &[f64]| 4.2;
        let g = finite_difference_gradient(f, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_difference_degree_two_polynomial_is_near_exact() {
        // central differences are exact on quadratics up to rounding
        let f = |x: &[f64]| 2.0 * x[0] * x[0] - 3.0 * x[0] * x[1] + x[1] + 7.0;
        let x = [1.5, -0.75];
        let g = finite_difference_gradient(f, &x, 1e-5).unwrap();
        let expected = [4.0 * x[0] - 3.0 * x[1], -3.0 * x[0] + 1.0];
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn finite_difference_reports_non_finite() {
        let f = |x: &[f64]| 1.0 / x[0];
        let err = finite_difference_gradient(f, &[1e-5], 1e-5).unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteValue { .. }));
    }

    #[test]
    fn log_sum_exp_matches_naive_on_moderate_inputs() {
        let xs = [0.3f64, -1.2, 2.5, 0.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = RngStream::new(3);
        let a = Mat::from_fn(4, 3, |_, _| rng.next_uniform());
        let b = Mat::from_fn(3, 5, |_, _| rng.next_uniform());
        let ab = a.matmul(&b);
        let ab2 = a.matmul_transpose_b(&b.transpose());
        let ab3 = a.transpose().matmul_transpose_a(&b);
        for i in 0..4 {
            for j in 0..5 {
                assert!((ab.at(i, j) - ab2.at(i, j)).abs() < 1e-12);
                assert!((ab.at(i, j) - ab3.at(i, j)).abs() < 1e-12);
            }
        }
    }
}
