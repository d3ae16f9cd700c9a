//! Synthetic union-of-subspaces data.

use ndarray::{s, Array2};
use ndarray_linalg::QR;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ReduError, Result};
use crate::sample::{ClassId, LabelAssignment, SampleMatrix};

/// Class `j` draws `counts[j]` samples from its own random `r`-dimensional
/// subspace with Gaussian coefficients, plus isotropic noise of scale `sigma`.
/// The `k` subspaces are mutually orthogonal. Columns are grouped by class
/// and classes are labeled `0..k`.
pub fn synth_subspace_mixture(
    d: usize,
    k: usize,
    r: usize,
    counts: &[usize],
    sigma: f64,
    seed: u64,
) -> Result<(SampleMatrix, LabelAssignment)> {
    if k == 0 || r == 0 || k * r > d {
        return Err(ReduError::invalid(format!(
            "cannot place {k} orthogonal {r}-dimensional subspaces in dimension {d}"
        )));
    }
    if counts.len() != k || counts.contains(&0) {
        return Err(ReduError::invalid(
            "need a positive sample count for every class",
        ));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(ReduError::invalid(
            "noise scale must be finite and non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let g = Array2::from_shape_fn((d, k * r), |_| normal());
    let (q, _) = g
        .qr()
        .map_err(|e| ReduError::numerical(format!("QR failed: {e}")))?;
    let m: usize = counts.iter().sum();
    let mut x = Array2::zeros((d, m));
    let mut labels = Vec::with_capacity(m);
    let mut col = 0;
    for (j, &mj) in counts.iter().enumerate() {
        let basis = q.slice(s![.., j * r..(j + 1) * r]);
        for _ in 0..mj {
            let coef = ndarray::Array1::from_shape_fn(r, |_| normal());
            let mut v = basis.dot(&coef);
            if sigma > 0.0 {
                v.mapv_inplace(|a| a + sigma * normal());
            }
            x.column_mut(col).assign(&v);
            labels.push(ClassId(j as u32));
            col += 1;
        }
    }
    Ok((SampleMatrix::new(x)?, LabelAssignment::new(labels)?))
}
