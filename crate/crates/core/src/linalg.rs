//! Dense linear-algebra kernels shared by the other modules: Kronecker
//! products, symmetric eigendecomposition, SPD solves, and the column-major
//! vec/MAT reshaping convention.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Dense column-major matrix of `f64`.
pub type DenseMatrix = DMatrix<f64>;
/// Dense column vector of `f64`.
pub type DenseVector = DVector<f64>;

/// Symmetric eigendecomposition with eigenvalues in ascending order and
/// orthonormal eigenvectors as columns. Eigenvector signs are normalized so
/// that the first component of significant magnitude is positive.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DenseVector,
    pub vectors: DenseMatrix,
}

impl SymEig {
    /// Reconstructs `U diag(values) U^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let d = DenseMatrix::from_diagonal(&self.values);
        &self.vectors * d * self.vectors.transpose()
    }

    /// Applies `U diag(values^-1) U^T` to a vector.
    pub fn inv_apply(&self, x: &DenseVector) -> DenseVector {
        let mut y = self.vectors.transpose() * x;
        for (yi, &v) in y.iter_mut().zip(self.values.iter()) {
            *yi /= v;
        }
        &self.vectors * y
    }
}

/// Kronecker product `A ⊗ B`: block (i, j) of the result is `A[i,j] * B`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ma, na) = a.shape();
    let (mb, nb) = b.shape();
    let mut out = DenseMatrix::zeros(ma * mb, na * nb);
    for j in 0..na {
        for i in 0..ma {
            let scale = a[(i, j)];
            if scale == 0.0 {
                continue;
            }
            for jb in 0..nb {
                for ib in 0..mb {
                    out[(i * mb + ib, j * nb + jb)] = scale * b[(ib, jb)];
                }
            }
        }
    }
    out
}

/// Computes `(A ⊗ B) x` without materializing the Kronecker product, using
/// the identity `(A ⊗ B) vec(X) = vec(B X A^T)` with `X = MAT(x)` having
/// `cols(B)` rows.
pub fn kron_matvec(a: &DenseMatrix, b: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    if x.len() != a.ncols() * b.ncols() {
        return Err(Error::DimMismatch {
            expected: a.ncols() * b.ncols(),
            got: x.len(),
        });
    }
    let xm = DenseMatrix::from_column_slice(b.ncols(), a.ncols(), x.as_slice());
    let y = b * xm * a.transpose();
    Ok(DenseVector::from_column_slice(y.as_slice()))
}

/// Symmetric eigendecomposition. The input is symmetrized as `(A + A^T)/2`
/// before factorization. Eigenvalues come out in ascending order.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEig> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let mut values = DenseVector::zeros(n);
    let mut vectors = DenseMatrix::zeros(n, n);
    for (k, &idx) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[idx];
        let mut col = eig.eigenvectors.column(idx).clone_owned();
        sign_normalize(&mut col);
        vectors.set_column(k, &col);
    }
    Ok(SymEig { values, vectors })
}

/// Flips the sign of `v` so that its first component of magnitude above
/// `1e-12 * ||v||` is positive.
pub fn sign_normalize(v: &mut DenseVector) {
    let tol = 1e-12 * v.norm();
    if let Some(&lead) = v.iter().find(|x| x.abs() > tol) {
        if lead < 0.0 {
            *v = -&*v;
        }
    }
}

/// Solves `(A + jitter * I) x = b` for symmetric positive definite `A` via
/// Cholesky. On factorization failure the jitter is escalated by a factor of
/// 10 up to 3 times before signalling `Singular`.
pub fn solve_spd(a: &DenseMatrix, b: &DenseVector, jitter: f64) -> Result<DenseVector> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if a.nrows() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    let n = a.nrows();
    let base = a.diagonal().amax().max(1.0);
    let mut jit = jitter;
    for attempt in 0..4 {
        let m = if jit == 0.0 {
            a.clone()
        } else {
            let mut m = a.clone();
            for i in 0..n {
                m[(i, i)] += jit;
            }
            m
        };
        if let Some(chol) = m.cholesky() {
            return Ok(chol.solve(b));
        }
        if attempt == 0 && jit == 0.0 {
            jit = 1e-12 * base;
        } else {
            jit *= 10.0;
        }
    }
    Err(Error::Singular)
}

/// Orthonormalizes the given columns by modified Gram-Schmidt, dropping any
/// column whose remainder falls below `1e-10` of its original norm.
pub fn mgs_orthonormalize(cols: &[DenseVector]) -> Vec<DenseVector> {
    let mut basis: Vec<DenseVector> = Vec::with_capacity(cols.len());
    for c in cols {
        let orig = c.norm();
        if orig == 0.0 {
            continue;
        }
        let mut v = c.clone();
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        if v.norm() > 1e-10 * orig {
            let n = v.norm();
            basis.push(v / n);
        }
    }
    basis
}
