//! Dense symmetric linear algebra shared by the objective, builder and merge.
//!
//! Factorizations go through LAPACK (via `ndarray-linalg`). Products that
//! feed the test-time transform go through [`apply_columns`], whose result for
//! any column depends only on that column, so batched and single-sample
//! evaluation agree bit for bit.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::cholesky::{CholeskyFactorized, DeterminantC, FactorizeC, InverseC};
use ndarray_linalg::{Eigh, UPLO};

use crate::error::{ReduError, Result};

/// Replace `a` with `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

pub fn max_asymmetry(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Largest absolute entrywise difference; `inf` on shape mismatch.
pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn trace(a: ArrayView2<f64>) -> f64 {
    a.diag().sum()
}

/// `z zᵀ`, symmetrized.
pub fn gram(z: ArrayView2<f64>) -> Array2<f64> {
    let mut g = z.dot(&z.t());
    symmetrize(&mut g);
    g
}

/// Cholesky factor of a symmetric positive definite matrix.
pub struct SpdFactor {
    inner: CholeskyFactorized<ndarray::OwnedRepr<f64>>,
}

impl SpdFactor {
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        let inner = a
            .factorizec(UPLO::Lower)
            .map_err(|e| ReduError::numerical(format!("cholesky factorization failed: {e}")))?;
        Ok(SpdFactor { inner })
    }

    /// Exactly symmetric inverse.
    pub fn inverse(&self) -> Result<Array2<f64>> {
        self.inner
            .invc()
            .map_err(|e| ReduError::numerical(format!("cholesky inverse failed: {e}")))
    }

    pub fn ln_det(&self) -> f64 {
        self.inner.ln_detc()
    }
}

/// True when every eigenvalue of `a` exceeds `-tol`, tested by factoring `a + tol·I`.
pub fn is_psd_within(a: &Array2<f64>, tol: f64) -> bool {
    let mut shifted = a.clone();
    for i in 0..a.nrows() {
        shifted[[i, i]] += tol;
    }
    SpdFactor::new(&shifted).is_ok()
}

/// Symmetric eigendecomposition with eigenvalues in descending order; the
/// eigenvectors are the matching columns.
pub fn sym_eigen_desc(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (vals, vecs) = a
        .eigh(UPLO::Lower)
        .map_err(|e| ReduError::numerical(format!("symmetric eigensolver failed: {e}")))?;
    let n = vals.len();
    let order: Vec<usize> = (0..n).rev().collect();
    let vals = Array1::from_iter(order.iter().map(|&i| vals[i]));
    let vecs = vecs.select(Axis(1), &order);
    Ok((vals, vecs))
}

const MR: usize = 4;
const NR: usize = 8;
const PANEL: usize = 64;

/// `a · z` for a row-major `a` (p×d) and `z` (d×n).
///
/// Every output entry is accumulated as a plain sequential sum over the inner
/// index, regardless of `n` or the column's position, so column `j` of the
/// result is bit-identical to `a · z[:, j]` computed alone.
pub fn apply_columns(a: ArrayView2<f64>, z: ArrayView2<f64>) -> Array2<f64> {
    let (p, d) = a.dim();
    assert_eq!(d, z.nrows(), "inner dimensions differ");
    let n = z.ncols();
    let a = a.as_standard_layout();
    let z = z.as_standard_layout();
    let mut out = vec![0.0f64; p * n];
    kernel(
        a.as_slice().expect("standard layout"),
        p,
        d,
        z.as_slice().expect("standard layout"),
        n,
        &mut out,
    );
    Array2::from_shape_vec((p, n), out).expect("shape")
}

fn kernel(a: &[f64], p: usize, d: usize, z: &[f64], n: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { kernel_avx2(a, p, d, z, n, out) };
            return;
        }
    }
    kernel_body(a, p, d, z, n, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn kernel_avx2(a: &[f64], p: usize, d: usize, z: &[f64], n: usize, out: &mut [f64]) {
    kernel_body(a, p, d, z, n, out)
}

// No fused multiply-add: each term is rounded as `acc + (a * z)` in every path.
#[inline(always)]
fn kernel_body(a: &[f64], p: usize, d: usize, z: &[f64], n: usize, out: &mut [f64]) {
    let mut pack = vec![0.0f64; d * PANEL];
    let mut j0 = 0;
    while j0 < n {
        let w = PANEL.min(n - j0);
        for t in 0..d {
            pack[t * w..t * w + w].copy_from_slice(&z[t * n + j0..t * n + j0 + w]);
        }
        let mut i = 0;
        while i < p {
            let mr = MR.min(p - i);
            let mut jj = 0;
            if mr == MR {
                while jj + NR <= w {
                    let mut acc = [[0.0f64; NR]; MR];
                    for t in 0..d {
                        let zr: &[f64; NR] = pack[t * w + jj..t * w + jj + NR]
                            .try_into()
                            .expect("panel width");
                        for (r, row) in acc.iter_mut().enumerate() {
                            let av = a[(i + r) * d + t];
                            for c in 0..NR {
                                row[c] += av * zr[c];
                            }
                        }
                    }
                    for (r, row) in acc.iter().enumerate() {
                        let base = (i + r) * n + j0 + jj;
                        out[base..base + NR].copy_from_slice(row);
                    }
                    jj += NR;
                }
            }
            for r in 0..mr {
                let arow = &a[(i + r) * d..(i + r + 1) * d];
                for c in jj..w {
                    let mut s = 0.0f64;
                    for (t, &av) in arow.iter().enumerate() {
                        s += av * pack[t * w + c];
                    }
                    out[(i + r) * n + j0 + c] = s;
                }
            }
            i += MR;
        }
        j0 += w;
    }
}
