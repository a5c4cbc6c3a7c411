//! Symmetric dense linear algebra at small dimension (d ≤ 32).
//!
//! The eigensolver is the cyclic Jacobi method: sweep all off-diagonal
//! (p,q) pairs, annihilate each with a plane rotation, repeat until the
//! off-diagonal Frobenius mass falls below `1e-12 · ‖A‖_F`. Deterministic,
//! no pivoting heuristics, and plenty accurate at these sizes.

use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("entry ({0},{1}) breaks symmetry: {2} vs {3}")]
    NotSymmetric(usize, usize, f64, f64),
    #[error("non-finite entry at ({0},{1})")]
    NotFinite(usize, usize),
    #[error("Jacobi sweep cap reached after {sweeps} sweeps (off-diagonal mass {off:.3e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("matrix is not PSD: eigenvalue {0} < -1e-10")]
    NotPsd(f64),
    #[error("singular linear system (pivot {0:.3e} at column {1})")]
    Singular(f64, usize),
}

/// Dense symmetric d×d matrix; symmetry is checked at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>, // row-major, dim*dim
}

impl SymMatrix {
    /// Build from row-major entries, verifying exact symmetry and finiteness.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self, LinalgError> {
        assert_eq!(entries.len(), dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                let v = entries[i * dim + j];
                if !v.is_finite() {
                    return Err(LinalgError::NotFinite(i, j));
                }
                let w = entries[j * dim + i];
                if v != w {
                    return Err(LinalgError::NotSymmetric(i, j, v, w));
                }
            }
        }
        Ok(SymMatrix { dim, entries })
    }

    /// Build from an arbitrary square matrix by averaging with its transpose.
    pub fn symmetrize(m: &Mat) -> Self {
        assert_eq!(m.rows(), m.cols());
        let d = m.rows();
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                entries[i * d + j] = 0.5 * (m.get(i, j) + m.get(j, i));
            }
        }
        SymMatrix { dim: d, entries }
    }

    pub fn diag(values: &[f64]) -> Self {
        let d = values.len();
        let mut entries = vec![0.0; d * d];
        for (i, &v) in values.iter().enumerate() {
            entries[i * d + i] = v;
        }
        SymMatrix { dim: d, entries }
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix::diag(&vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.dim, self.dim, self.entries.clone())
    }

    /// U·diag(v)·Uᵀ for an orthogonal frame U given as a Mat.
    pub fn from_frame(frame: &Mat, eigenvalues: &[f64]) -> Self {
        let d = frame.rows();
        assert_eq!(frame.cols(), d);
        assert_eq!(eigenvalues.len(), d);
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for (k, &lam) in eigenvalues.iter().enumerate() {
                    s += frame.get(i, k) * lam * frame.get(j, k);
                }
                entries[i * d + j] = s;
            }
        }
        // enforce exact symmetry against roundoff in the two orderings
        for i in 0..d {
            for j in 0..i {
                let v = 0.5 * (entries[i * d + j] + entries[j * d + i]);
                entries[i * d + j] = v;
                entries[j * d + i] = v;
            }
        }
        SymMatrix { dim: d, entries }
    }
}

/// Eigendecomposition with eigenvalues ascending and matching eigenvector columns.
#[derive(Clone, Debug)]
pub struct EigenDecomp {
    pub eigenvalues: Vec<f64>,
    /// Orthogonal matrix; column k pairs with eigenvalues[k].
    pub eigenvectors: Mat,
}

const JACOBI_SWEEP_CAP: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(a: &SymMatrix) -> Result<EigenDecomp, LinalgError> {
    let d = a.dim;
    let mut m = a.entries.clone();
    let mut v = Mat::identity(d);
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * frob.max(f64::MIN_POSITIVE);

    let off_mass = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                s += 2.0 * m[p * d + q] * m[p * d + q];
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_mass(&m) > tol {
        if sweeps >= JACOBI_SWEEP_CAP {
            return Err(LinalgError::NoConvergence { sweeps, off: off_mass(&m) });
        }
        sweeps += 1;
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                // rotation angle annihilating m[p][q]
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rows/columns p and q of m
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                m[p * d + q] = 0.0;
                m[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    // sort ascending, ties keep original column order (stable sort on index)
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[i * d + i].partial_cmp(&m[j * d + j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * d + i]).collect();
    let mut vecs = Mat::zeros(d, d);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..d {
            vecs.set(k, new_col, v.get(k, old_col));
        }
    }
    Ok(EigenDecomp { eigenvalues, eigenvectors: vecs })
}

/// PSD square root via eigendecomposition; eigenvalues in [-1e-10, 0) are
/// clamped to 0 to absorb roundoff in empirically estimated covariances.
pub fn sqrtm_psd(a: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let eig = sym_eig(a)?;
    let mut roots = Vec::with_capacity(a.dim);
    for &lam in &eig.eigenvalues {
        if lam < -1e-10 {
            return Err(LinalgError::NotPsd(lam));
        }
        roots.push(lam.max(0.0).sqrt());
    }
    Ok(SymMatrix::from_frame(&eig.eigenvectors, &roots))
}

pub fn frob_norm(a: &SymMatrix) -> f64 {
    a.entries.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral norm = max |eigenvalue| (symmetric input).
pub fn op_norm(a: &SymMatrix) -> f64 {
    let eig = sym_eig(a).expect("op_norm: eigensolver failed on symmetric input");
    eig.eigenvalues.iter().fold(0.0f64, |acc, &l| acc.max(l.abs()))
}

/// Solve A·x = b for small dense A by Gaussian elimination with partial pivoting.
pub fn solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, m.get(r, col)))
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        if pivot.abs() < 1e-300 {
            return Err(LinalgError::Singular(pivot, col));
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = m.get(col, j);
                m.set(col, j, m.get(pivot_row, j));
                m.set(pivot_row, j, tmp);
            }
            x.swap(col, pivot_row);
        }
        for r in (col + 1)..n {
            let f = m.get(r, col) / m.get(col, col);
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m.get(r, j) - f * m.get(col, j);
                m.set(r, j, v);
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        for r in (col + 1)..n {
            x[col] -= m.get(col, r) * x[r];
        }
        x[col] /= m.get(col, col);
    }
    Ok(x)
}

/// 2×2 rotation matrix R(θ), handy for constructing test covariances.
pub fn rotation2(theta: f64) -> Mat {
    let (s, c) = theta.sin_cos();
    Mat::from_vec(2, 2, vec![c, -s, s, c])
}
