//! Coding rates, class-wise normalization and the per-layer expansion and
//! compression operators.
//!
//! For features `Z ∈ ℝ^{d×m}` split into `k` classes with `m_j` samples each:
//!
//! * `R(Z)   = ½ logdet(I + α Z Zᵀ)`, `α = d / (m ε²)`
//! * `Rc(Z)  = Σ_j (γ_j / 2) logdet(I + α_j Z_j Z_jᵀ)`, `α_j = d / (m_j ε²)`, `γ_j = m_j / m`
//! * `ΔR     = R − Rc`
//!
//! Every log-determinant and inverse goes through a Cholesky factor of
//! `I + αΣ`.

use ndarray::{Array2, Axis};

use crate::error::{ReduError, Result};
use crate::linalg::{self, SpdFactor};
use crate::sample::{LabelAssignment, SampleMatrix};

const SYMMETRY_TOL: f64 = 1e-8;
const SPECTRUM_TOL: f64 = 1e-8;

/// Scalars `α`, `α_j`, `γ_j` for a fixed dimension, class sizes and precision.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub alpha_classes: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl CodingParams {
    pub fn new(dim: usize, counts: &[usize], epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if dim == 0 {
            return Err(ReduError::invalid("dimension must be positive"));
        }
        if counts.is_empty() || counts.contains(&0) {
            return Err(ReduError::invalid("every class needs at least one sample"));
        }
        let m: usize = counts.iter().sum();
        let d = dim as f64;
        let eps2 = epsilon * epsilon;
        Ok(CodingParams {
            epsilon,
            alpha: d / (m as f64 * eps2),
            alpha_classes: counts.iter().map(|&mj| d / (mj as f64 * eps2)).collect(),
            gamma: counts.iter().map(|&mj| mj as f64 / m as f64).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.gamma.len()
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(ReduError::invalid(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(())
}

/// `α(I + αΣ)⁻¹` together with `½ logdet(I + αΣ)`, from one factorization.
pub(crate) struct CodingOperator {
    pub matrix: Array2<f64>,
    pub half_logdet: f64,
}

fn shifted(sigma: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    let (r, c) = sigma.dim();
    if r != c || r == 0 {
        return Err(ReduError::invalid(format!(
            "covariance must be square and non-empty, got {r}x{c}"
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ReduError::invalid(format!(
            "scale must be positive, got {alpha}"
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(ReduError::invalid("covariance has non-finite entries"));
    }
    let scale = sigma.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let asym = linalg::max_asymmetry(sigma.view());
    if asym > SYMMETRY_TOL * scale {
        return Err(ReduError::invalid(format!(
            "covariance is not symmetric (max deviation {asym:e})"
        )));
    }
    let mut a = sigma * alpha;
    linalg::symmetrize(&mut a);
    for i in 0..r {
        a[[i, i]] += 1.0;
    }
    Ok(a)
}

pub(crate) fn coding_operator(sigma: &Array2<f64>, alpha: f64) -> Result<CodingOperator> {
    let factor = SpdFactor::new(&shifted(sigma, alpha)?)?;
    let mut matrix = factor.inverse()?;
    matrix *= alpha;
    Ok(CodingOperator {
        matrix,
        half_logdet: 0.5 * factor.ln_det(),
    })
}

pub(crate) fn half_logdet(sigma: &Array2<f64>, alpha: f64) -> Result<f64> {
    Ok(0.5 * SpdFactor::new(&shifted(sigma, alpha)?)?.ln_det())
}

/// `R(Z, ε)`.
pub fn coding_rate(z: &SampleMatrix, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    let alpha = z.dim() as f64 / (z.len() as f64 * epsilon * epsilon);
    half_logdet(&linalg::gram(z.view()), alpha)
}

/// `Rc(Z, Π, ε)`.
pub fn compression_rate(z: &SampleMatrix, labels: &LabelAssignment, epsilon: f64) -> Result<f64> {
    labels.check_samples(z)?;
    let params = CodingParams::new(z.dim(), labels.counts(), epsilon)?;
    let covs = class_covariances(z, labels);
    let mut total = 0.0;
    for (j, cov) in covs.iter().enumerate() {
        total += params.gamma[j] * half_logdet(cov, params.alpha_classes[j])?;
    }
    Ok(total)
}

/// `ΔR(Z, Π, ε) = R − Rc`.
pub fn rate_reduction(z: &SampleMatrix, labels: &LabelAssignment, epsilon: f64) -> Result<f64> {
    Ok(coding_rate(z, epsilon)? - compression_rate(z, labels, epsilon)?)
}

/// `ΔR` evaluated from per-class second moments `Σ_j = Z_j Z_jᵀ` alone.
pub fn rate_reduction_from_covariances(
    class_covs: &[Array2<f64>],
    params: &CodingParams,
) -> Result<f64> {
    if class_covs.len() != params.num_classes() {
        return Err(ReduError::invalid(
            "covariance count differs from class count",
        ));
    }
    let total = total_covariance(class_covs)?;
    let mut rate = half_logdet(&total, params.alpha)?;
    for (j, cov) in class_covs.iter().enumerate() {
        rate -= params.gamma[j] * half_logdet(cov, params.alpha_classes[j])?;
    }
    Ok(rate)
}

/// `Σ_j Σ_j`, summed in registry order.
pub(crate) fn total_covariance(class_covs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = class_covs
        .first()
        .ok_or_else(|| ReduError::invalid("no class covariances"))?;
    let mut total = first.clone();
    for c in &class_covs[1..] {
        if c.dim() != total.dim() {
            return Err(ReduError::invalid("class covariances differ in shape"));
        }
        total += c;
    }
    Ok(total)
}

/// `Z_j Z_jᵀ` per registered class.
pub fn class_covariances(z: &SampleMatrix, labels: &LabelAssignment) -> Vec<Array2<f64>> {
    labels
        .members()
        .iter()
        .map(|cols| linalg::gram(z.data().select(Axis(1), cols).view()))
        .collect()
}

/// Rescale every class so that `‖Z_j‖²_F = m_j`.
pub fn normalize_classwise(z: &SampleMatrix, labels: &LabelAssignment) -> Result<SampleMatrix> {
    labels.check_samples(z)?;
    let mut sq = vec![0.0f64; labels.num_classes()];
    for (col, &j) in z.data().columns().into_iter().zip(labels.positions()) {
        sq[j] += col.dot(&col);
    }
    let mut scale = Vec::with_capacity(sq.len());
    for (j, &s) in sq.iter().enumerate() {
        if !(s > 0.0) {
            return Err(ReduError::Degenerate(format!(
                "class {} has zero Frobenius norm",
                labels.registry()[j]
            )));
        }
        scale.push((labels.counts()[j] as f64 / s).sqrt());
    }
    let mut out = z.data().clone();
    for (mut col, &j) in out.columns_mut().into_iter().zip(labels.positions()) {
        col *= scale[j];
    }
    SampleMatrix::new(out)
}

/// Scale one class block (`d × m_j`) to squared Frobenius norm `m_j`.
pub(crate) fn normalize_block(block: &mut Array2<f64>) -> std::result::Result<(), String> {
    let sq: f64 = block.iter().map(|v| v * v).sum();
    if !(sq > 0.0) || !sq.is_finite() {
        return Err(format!("class block has squared norm {sq}"));
    }
    *block *= (block.ncols() as f64 / sq).sqrt();
    Ok(())
}

/// `E = α(I + αΣ)⁻¹` for the total second moment `Σ = Z Zᵀ`.
pub fn expansion_matrix(sigma_total: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    Ok(coding_operator(sigma_total, alpha)?.matrix)
}

/// `C_j = α_j(I + α_jΣ_j)⁻¹` for one class's second moment.
pub fn compression_matrix(sigma_class: &Array2<f64>, alpha_class: f64) -> Result<Array2<f64>> {
    Ok(coding_operator(sigma_class, alpha_class)?.matrix)
}

/// Inverse of [`compression_matrix`]: `Σ = ((C/α_j)⁻¹ − I)/α_j`.
///
/// Uses a symmetric eigendecomposition of `C/α_j`; eigenvalues must lie in
/// `(0, 1 + 1e-8]`, and the slightly negative values this admits are clamped
/// to zero in the result.
pub fn recover_covariance(c: &Array2<f64>, alpha_class: f64) -> Result<Array2<f64>> {
    let (r, cols) = c.dim();
    if r != cols || r == 0 {
        return Err(ReduError::invalid("compression matrix must be square"));
    }
    if !(alpha_class.is_finite() && alpha_class > 0.0) {
        return Err(ReduError::invalid("class scale must be positive"));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(ReduError::invalid(
            "compression matrix has non-finite entries",
        ));
    }
    let mut scaled = c / alpha_class;
    linalg::symmetrize(&mut scaled);
    let (vals, vecs) = linalg::sym_eigen_desc(&scaled)?;
    let mut spectrum = Vec::with_capacity(vals.len());
    for &lam in vals.iter() {
        if !(lam > 0.0 && lam <= 1.0 + SPECTRUM_TOL) {
            return Err(ReduError::InconsistentParameter(format!(
                "compression spectrum value {lam:e} outside (0, 1]"
            )));
        }
        spectrum.push(((1.0 / lam - 1.0) / alpha_class).max(0.0));
    }
    let mut weighted = vecs.clone();
    for (mut col, s) in weighted.columns_mut().into_iter().zip(&spectrum) {
        col *= *s;
    }
    let mut sigma = weighted.dot(&vecs.t());
    linalg::symmetrize(&mut sigma);
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::sample::ClassId;
    use ndarray::array;
    use ndarray_linalg::SVD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[u32]) -> LabelAssignment {
        LabelAssignment::new(v.iter().copied().map(ClassId).collect()).unwrap()
    }

    fn random_matrix(d: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((d, m), |_| rng.random_range(-1.0..1.0))
    }

    fn random_psd(d: usize, seed: u64) -> Array2<f64> {
        let a = random_matrix(d, d, seed);
        let mut s = a.dot(&a.t()) / d as f64;
        linalg::symmetrize(&mut s);
        s
    }

    fn identity_pair() -> SampleMatrix {
        SampleMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn coding_rate_of_zero_features_is_zero() {
        let z = SampleMatrix::new(Array2::zeros((4, 7))).unwrap();
        assert_eq!(coding_rate(&z, 0.5).unwrap(), 0.0);
        assert_eq!(
            compression_rate(&z, &labels(&[0, 0, 1, 1, 2, 2, 2]), 0.5).unwrap(),
            0.0
        );
    }

    #[test]
    fn coding_rate_identity_pair() {
        // α = 2 / (2 · 0.25) = 4, det(I + 4I) = 25, ½ log 25 = log 5.
        let r = coding_rate(&identity_pair(), 0.5).unwrap();
        assert!((r - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn coding_rate_matches_singular_value_formula() {
        let z = SampleMatrix::new(random_matrix(5, 20, 11)).unwrap();
        let eps = 0.5;
        let alpha = 5.0 / (20.0 * eps * eps);
        let (_, s, _) = z.data().svd(false, false).unwrap();
        let oracle: f64 = s.iter().map(|si| 0.5 * (1.0 + alpha * si * si).ln()).sum();
        assert!((coding_rate(&z, eps).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn compression_rate_identity_pair_two_classes() {
        // α_j = 8, γ_j = ½: Σ_j ½·½·log 9 = log 3.
        let r = compression_rate(&identity_pair(), &labels(&[1, 2]), 0.5).unwrap();
        assert!((r - 3f64.ln()).abs() < 1e-14);
        let dr = rate_reduction(&identity_pair(), &labels(&[1, 2]), 0.5).unwrap();
        assert!((dr - (5f64.ln() - 3f64.ln())).abs() < 1e-14);
        assert!((dr - 0.51083).abs() < 1e-5);
    }

    #[test]
    fn single_class_has_no_rate_reduction() {
        let z = SampleMatrix::new(random_matrix(6, 15, 3)).unwrap();
        let l = labels(&[7; 15]);
        let r = coding_rate(&z, 0.5).unwrap();
        assert!((compression_rate(&z, &l, 0.5).unwrap() - r).abs() < 1e-12);
        assert!(rate_reduction(&z, &l, 0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rate_reduction_invariant_under_consistent_permutation() {
        let z = SampleMatrix::new(random_matrix(6, 12, 5)).unwrap();
        let lab = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2];
        let base = rate_reduction(&z, &labels(&lab), 0.5).unwrap();
        let perm: Vec<usize> = vec![11, 3, 7, 0, 5, 9, 1, 2, 10, 4, 8, 6];
        let zp = z.select(&perm).unwrap();
        let lp: Vec<u32> = perm.iter().map(|&i| lab[i]).collect();
        let permuted = rate_reduction(&zp, &labels(&lp), 0.5).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn coding_rate_rejects_bad_epsilon() {
        assert!(coding_rate(&identity_pair(), 0.0).is_err());
        assert!(coding_rate(&identity_pair(), f64::NAN).is_err());
    }

    #[test]
    fn coding_rate_grows_as_epsilon_shrinks() {
        let z = SampleMatrix::new(random_matrix(4, 9, 8)).unwrap();
        let coarse = coding_rate(&z, 1.0).unwrap();
        let fine = coding_rate(&z, 0.1).unwrap();
        assert!(fine > coarse);
    }

    #[test]
    fn normalization_hits_class_sizes() {
        let z = SampleMatrix::new(random_matrix(5, 10, 21)).unwrap();
        let l = labels(&[0, 1, 1, 0, 2, 2, 2, 0, 1, 1]);
        let n = normalize_classwise(&z, &l).unwrap();
        for (j, cols) in l.members().iter().enumerate() {
            let sq: f64 = cols.iter().map(|&c| n.column(c).dot(&n.column(c))).sum();
            let mj = l.counts()[j] as f64;
            assert!((sq - mj).abs() <= 1e-10 * mj);
        }
        // Idempotent.
        let again = normalize_classwise(&n, &l).unwrap();
        assert!(max_abs_diff(again.view(), n.view()) < 1e-14);
    }

    #[test]
    fn normalization_undoes_uniform_class_scaling() {
        // A single sample of norm one per class is already normalized; doubling it halves back.
        let a = identity_pair();
        let doubled = SampleMatrix::new(a.data() * 2.0).unwrap();
        let n = normalize_classwise(&doubled, &labels(&[0, 1])).unwrap();
        assert!(max_abs_diff(n.view(), a.view()) < 1e-15);
    }

    #[test]
    fn normalization_rejects_zero_class() {
        let z = SampleMatrix::new(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let err = normalize_classwise(&z, &labels(&[0, 1])).unwrap_err();
        assert!(matches!(err, ReduError::Degenerate(_)));
    }

    #[test]
    fn expansion_and_compression_closed_forms() {
        let zero = Array2::<f64>::zeros((3, 3));
        let e = expansion_matrix(&zero, 2.5).unwrap();
        assert!(max_abs_diff(e.view(), (Array2::<f64>::eye(3) * 2.5).view()) < 1e-15);
        let c = compression_matrix(&Array2::eye(3), 4.0).unwrap();
        assert!(max_abs_diff(c.view(), (Array2::<f64>::eye(3) * 0.8).view()) < 1e-15);
    }

    #[test]
    fn expansion_multiplies_back_to_alpha() {
        for (d, seed) in [(3usize, 1u64), (8, 2), (20, 3)] {
            let s = random_psd(d, seed);
            let alpha = 1.7;
            let e = expansion_matrix(&s, alpha).unwrap();
            let back = e.dot(&(Array2::<f64>::eye(d) + &s * alpha));
            assert!(max_abs_diff(back.view(), (Array2::<f64>::eye(d) * alpha).view()) < 1e-9);
            assert_eq!(linalg::max_asymmetry(e.view()), 0.0);
        }
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let s = array![[1.0, 0.5], [0.0, 1.0]];
        assert!(matches!(
            expansion_matrix(&s, 1.0),
            Err(ReduError::InvalidInput(_))
        ));
    }

    #[test]
    fn recover_inverts_compression() {
        let zero = Array2::<f64>::zeros((4, 4));
        let r = recover_covariance(&(Array2::<f64>::eye(4) * 3.0), 3.0).unwrap();
        assert!(max_abs_diff(r.view(), zero.view()) < 1e-15);
        let r = recover_covariance(&(Array2::<f64>::eye(2) * 0.8), 4.0).unwrap();
        assert!(max_abs_diff(r.view(), Array2::<f64>::eye(2).view()) < 1e-14);
        for seed in 0..5 {
            let s = random_psd(10, 100 + seed);
            let back = recover_covariance(&compression_matrix(&s, 2.0).unwrap(), 2.0).unwrap();
            assert!(max_abs_diff(back.view(), s.view()) < 1e-10);
        }
    }

    #[test]
    fn recover_rejects_inadmissible_spectrum() {
        let c = Array2::<f64>::eye(2) * 5.0;
        assert!(matches!(
            recover_covariance(&c, 4.0),
            Err(ReduError::InconsistentParameter(_))
        ));
        let c = array![[1.0, 0.0], [0.0, -0.5]];
        assert!(recover_covariance(&c, 4.0).is_err());
    }

    #[test]
    fn coding_params_sum_gamma_to_one() {
        let p = CodingParams::new(10, &[3, 5, 7, 11], 0.5).unwrap();
        assert!((p.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p.alpha - 10.0 / (26.0 * 0.25)).abs() < 1e-15);
        assert!(CodingParams::new(10, &[3, 0], 0.5).is_err());
    }

    #[test]
    fn covariance_route_matches_feature_route() {
        let z = SampleMatrix::new(random_matrix(6, 18, 44)).unwrap();
        let l = labels(&[0, 1, 2].repeat(6));
        let params = CodingParams::new(6, l.counts(), 0.5).unwrap();
        let from_cov =
            rate_reduction_from_covariances(&class_covariances(&z, &l), &params).unwrap();
        assert!((from_cov - rate_reduction(&z, &l, 0.5).unwrap()).abs() < 1e-12);
    }
}
