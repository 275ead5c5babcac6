//! Dense float64 linear algebra used throughout the crate.
//!
//! [`Matrix`] is row-major. The `vec` operator, however, stacks *columns*:
//! with that convention `(S ⊗ A) vec(X) = vec(A X Sᵀ)` holds, which is the
//! identity every Kronecker-factored computation here relies on.
//!
//! Eigen, Cholesky, LU and SVD factorizations are delegated to `nalgebra`;
//! Kronecker and Khatri-Rao products, vec/unvec and least squares are
//! implemented directly.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default cap on the number of entries a Kronecker product may produce.
pub const KRON_MAX_ENTRIES: usize = 1 << 26;

const SYM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row: Vec<String> = self.row(r).iter().take(8).map(|v| format!("{v:.4}")).collect();
            writeln!(f, "  {}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.matmul_unchecked(other))
    }

    /// Matrix product; panics on shape mismatch. Used internally where the
    /// shapes are guaranteed by construction.
    pub(crate) fn matmul_unchecked(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub(crate) fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub(crate) fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Matrix {
            rows: n,
            cols: m,
            data: out,
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "vector of length {} against {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute off-diagonal entry.
    pub fn max_offdiag_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j {
                    m = m.max(self[(i, j)].abs());
                }
            }
        }
        m
    }

    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self[(i, cols[j])])
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), self.cols, |i, j| self[(rows[i], j)])
    }

    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvectors: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl SymEigen {
    /// `Q diag(λ) Qᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let q = &self.eigenvectors;
        let scaled = Matrix::from_fn(q.rows(), q.cols(), |i, j| q[(i, j)] * self.eigenvalues[j]);
        scaled.matmul_t(q)
    }
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} has non-finite entries")))
    }
}

/// Symmetric eigendecomposition.
///
/// Inputs whose asymmetry exceeds 1e-6 relative (Frobenius) are rejected;
/// smaller asymmetries from accumulated roundoff are symmetrized away.
pub fn sym_eig(m: &Matrix) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition of non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    check_finite(m, "eigendecomposition input")?;
    let n = m.rows();
    if n == 0 {
        return Ok(SymEigen {
            eigenvectors: Matrix::zeros(0, 0),
            eigenvalues: Vec::new(),
        });
    }
    let asym = m.sub(&m.transpose())?.frobenius();
    let scale = m.frobenius();
    if asym > SYM_TOLERANCE * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Validation(format!(
            "matrix is not symmetric (asymmetry {asym:.3e} vs norm {scale:.3e})"
        )));
    }
    let sym = m.symmetrized();
    let eig = nalgebra::SymmetricEigen::new(sym.to_nalgebra());

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok(SymEigen {
        eigenvectors,
        eigenvalues,
    })
}

/// Kronecker product `a ⊗ b`, capped at [`KRON_MAX_ENTRIES`] entries.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    kron_with_limit(a, b, KRON_MAX_ENTRIES)
}

pub fn kron_with_limit(a: &Matrix, b: &Matrix, max_entries: usize) -> Result<Matrix> {
    let rows = a.rows().checked_mul(b.rows());
    let cols = a.cols().checked_mul(b.cols());
    let entries = rows.zip(cols).and_then(|(r, c)| r.checked_mul(c));
    match entries {
        Some(e) if e <= max_entries => {}
        _ => {
            return Err(Error::Size(format!(
                "kron of {}x{} and {}x{} exceeds {max_entries} entries",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )))
        }
    }
    let (p, q) = b.shape();
    let mut out = Matrix::zeros(a.rows() * p, a.cols() * q);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..p {
                for l in 0..q {
                    out[(i * p + k, j * q + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    Ok(out)
}

/// Column-wise Kronecker product of an `m×r` and an `n×r` matrix.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let (m, n, r) = (a.rows(), b.rows(), a.cols());
    Ok(Matrix::from_fn(m * n, r, |row, j| a[(row / n, j)] * b[(row % n, j)]))
}

/// Column-stacking vectorization.
pub fn vec(m: &Matrix) -> Vec<f64> {
    m.transpose().into_vec()
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot unvec {} values into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Matrix::from_fn(rows, cols, |i, j| v[j * rows + i]))
}

/// Least-squares solution of `a x ≈ b` through the ridge-stabilized normal
/// equations `(aᵀa + εI) x = aᵀb` with `ε = 1e-12·tr(aᵀa)/cols`.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "lstsq with {} equations but {} right-hand-side rows",
            a.rows(),
            b.rows()
        )));
    }
    check_finite(a, "lstsq design matrix")?;
    check_finite(b, "lstsq right-hand side")?;
    let mut gram = a.t_matmul(a);
    let n = gram.rows();
    let tr = gram.trace();
    if n == 0 || tr <= 0.0 || !tr.is_finite() {
        return Err(Error::Singular("lstsq design matrix is zero".into()));
    }
    gram.add_diagonal(1e-12 * tr / n as f64);
    let rhs = a.t_matmul(b);
    cholesky_solve(&gram, &rhs)
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn cholesky_solve(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let chol = nalgebra::Cholesky::new(m.symmetrized().to_nalgebra())
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))?;
    let x = chol.solve(&rhs.to_nalgebra());
    let out = Matrix::from_nalgebra(&x);
    check_finite(&out, "cholesky solution").map_err(|_| Error::Singular("ill-conditioned system".into()))?;
    Ok(out)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension("inverse of non-square matrix".into()));
    }
    let inv = cholesky_solve(m, &Matrix::identity(m.rows()))?;
    Ok(inv.symmetrized())
}

/// Solves a general square system `m x = rhs` by partial-pivot LU.
pub fn solve(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if !m.is_square() || m.rows() != rhs.rows() {
        return Err(Error::Dimension(format!(
            "solve with {}x{} system and {} rhs rows",
            m.rows(),
            m.cols(),
            rhs.rows()
        )));
    }
    check_finite(m, "linear system")?;
    let lu = nalgebra::LU::new(m.to_nalgebra());
    let x = lu
        .solve(&rhs.to_nalgebra())
        .ok_or_else(|| Error::Singular("LU factorization is singular".into()))?;
    let out = Matrix::from_nalgebra(&x);
    if !out.is_finite() {
        return Err(Error::Singular("linear system solution is not finite".into()));
    }
    Ok(out)
}

/// Thin SVD `m = U diag(σ) Vᵀ` with singular values in descending order.
pub fn svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    check_finite(m, "svd input")?;
    let svd = nalgebra::SVD::new(m.to_nalgebra(), true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = Matrix::from_fn(u.nrows(), k, |i, j| u[(i, order[j])]);
    let v = Matrix::from_fn(vt.ncols(), k, |i, j| vt[(order[j], i)]);
    Ok((u, sigma, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_sym(n: usize, rng: &mut impl Rng) -> Matrix {
        let m = random(n, n, rng);
        m.add(&m.transpose()).unwrap()
    }

    #[test]
    fn sym_eig_identity_and_diagonal() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        let qtq = e.eigenvectors.t_matmul(&e.eigenvectors);
        assert!(qtq.sub(&Matrix::identity(3)).unwrap().frobenius() < 1e-12);

        let e = sym_eig(&Matrix::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![4.0, 1.0]);
        assert!((e.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((e.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sym_eig_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_sym(8, &mut rng);
        let e = sym_eig(&m).unwrap();
        let rec = e.reconstruct();
        assert!(rec.sub(&m).unwrap().frobenius() / m.frobenius() < 1e-8);
        let qtq = e.eigenvectors.t_matmul(&e.eigenvectors);
        assert!(qtq.sub(&Matrix::identity(8)).unwrap().frobenius() < 1e-10);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let sum: f64 = e.eigenvalues.iter().sum();
        assert!((sum - m.trace()).abs() <= 1e-8 * m.trace().abs().max(1.0));
    }

    #[test]
    fn sym_eig_errors() {
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(sym_eig(&m), Err(Error::Validation(_))));
        let asym = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&asym), Err(Error::Validation(_))));
        // Roundoff-level asymmetry is tolerated.
        let mut nearly = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        nearly[(0, 1)] += 1e-12;
        assert!(sym_eig(&nearly).is_ok());
    }

    #[test]
    fn kron_identity_and_blocks() {
        let i6 = kron(&Matrix::identity(2), &Matrix::identity(3)).unwrap();
        assert_eq!(i6, Matrix::identity(6));

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let k = kron(&a, &b).unwrap();
        let mut expected = Matrix::zeros(4, 4);
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        expected[(2 * i + p, 2 * j + q)] = a[(i, j)] * b[(p, q)];
                    }
                }
            }
        }
        assert_eq!(k, expected);
        assert_eq!(k.row(0), &[0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn kron_size_limit() {
        let a = Matrix::zeros(10, 10);
        assert!(matches!(kron_with_limit(&a, &a, 9_999), Err(Error::Size(_))));
        assert!(kron_with_limit(&a, &a, 10_000).is_ok());
    }

    #[test]
    fn kron_vec_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3, 4] {
            let s = random(n, n, &mut rng);
            let a = random(n, n, &mut rng);
            let x = random(n, n, &mut rng);
            let lhs = kron(&s, &a).unwrap().matvec(&vec(&x)).unwrap();
            let rhs = vec(&a.matmul(&x).unwrap().matmul(&s.transpose()).unwrap());
            let err: f64 = lhs.iter().zip(&rhs).map(|(l, r)| (l - r).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = rhs.iter().map(|r| r * r).sum::<f64>().sqrt();
            assert!(err <= 1e-10 * norm);
        }
    }

    #[test]
    fn kron_eigenvalues_are_pairwise_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_sym(3, &mut rng);
        let b = random_sym(2, &mut rng);
        let ea = sym_eig(&a).unwrap().eigenvalues;
        let eb = sym_eig(&b).unwrap().eigenvalues;
        let mut products: Vec<f64> = ea.iter().flat_map(|x| eb.iter().map(move |y| x * y)).collect();
        products.sort_by(|x, y| y.total_cmp(x));
        let ek = sym_eig(&kron(&a, &b).unwrap()).unwrap().eigenvalues;
        for (p, k) in products.iter().zip(&ek) {
            assert!((p - k).abs() < 1e-8);
        }
    }

    #[test]
    fn khatri_rao_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(khatri_rao(&a, &b).unwrap().as_slice(), &[4.0, 10.0, 18.0]);

        let kr = khatri_rao(&Matrix::identity(2), &Matrix::identity(2)).unwrap();
        assert_eq!(kr.column(0), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(kr.column(1), vec![0.0, 0.0, 0.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 2, &mut rng);
        let b = random(4, 2, &mut rng);
        let kr = khatri_rao(&a, &b).unwrap();
        // Row (i, k) of the product holds a_{ij} b_{kj}, i outer.
        for i in 0..3 {
            for k in 0..4 {
                for j in 0..2 {
                    assert_eq!(kr[(i * 4 + k, j)], a[(i, j)] * b[(k, j)]);
                }
            }
        }
        assert!(matches!(khatri_rao(&a, &random(4, 3, &mut rng)), Err(Error::Dimension(_))));
    }

    #[test]
    fn vec_is_column_stacking() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(vec(&m), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(unvec(&[1.0, 2.0, 3.0], 2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn lstsq_identity_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random(4, 2, &mut rng);
        let x = lstsq(&Matrix::identity(4), &b).unwrap();
        assert!(x.sub(&b).unwrap().max_abs() < 1e-10);

        let a = random(20, 5, &mut rng);
        let b = random(20, 3, &mut rng);
        let x = lstsq(&a, &b).unwrap();
        let resid = b.sub(&a.matmul(&x).unwrap()).unwrap();
        assert!(a.t_matmul(&resid).max_abs() < 1e-8);
    }

    #[test]
    fn lstsq_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = random(12, 3, &mut rng);
        let t = random(12, 4, &mut rng);
        let ztz_inv = solve(&z.t_matmul(&z), &Matrix::identity(3)).unwrap();
        let pinv = ztz_inv.matmul(&z.transpose()).unwrap();
        let expected = pinv.matmul(&t).unwrap();
        assert!(lstsq(&z, &t).unwrap().sub(&expected).unwrap().max_abs() < 1e-9);
        assert!(matches!(lstsq(&Matrix::zeros(3, 2), &Matrix::zeros(3, 1)), Err(Error::Singular(_))));
    }

    proptest! {
        #[test]
        fn unvec_inverts_vec(rows in 1usize..7, cols in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(rows, cols, &mut rng);
            prop_assert_eq!(unvec(&vec(&m), rows, cols).unwrap(), m);
        }

        #[test]
        fn khatri_rao_columns_are_krons(m in 1usize..5, n in 1usize..5, r in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(m, r, &mut rng);
            let b = random(n, r, &mut rng);
            let kr = khatri_rao(&a, &b).unwrap();
            for j in 0..r {
                let col_a = Matrix::from_vec(m, 1, a.column(j)).unwrap();
                let col_b = Matrix::from_vec(n, 1, b.column(j)).unwrap();
                prop_assert_eq!(kr.column(j), kron(&col_a, &col_b).unwrap().into_vec());
            }
        }
    }
}
