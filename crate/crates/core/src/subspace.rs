//! Nearest-subspace classification from final-layer class covariances.

use ndarray::{s, Array2, ArrayView1};

use crate::error::{ReduError, Result};
use crate::forward::forward_batch;
use crate::linalg::sym_eigen_desc;
use crate::model::ReduNetModel;
use crate::sample::{ClassId, LabelAssignment, SampleMatrix};

/// Residuals within this fraction of `‖z‖²` of the smallest count as tied.
const TIE_TOL: f64 = 1e-12;

/// Orthonormal `d × r` basis per class, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSubspaces {
    pub classes: Vec<ClassId>,
    pub rank: usize,
    pub bases: Vec<Array2<f64>>,
}

impl ClassSubspaces {
    /// Top-`r` eigenvectors of each covariance; each vector's first nonzero
    /// coordinate is made positive.
    pub fn from_covariances(
        classes: &[ClassId],
        covariances: &[Array2<f64>],
        r: usize,
    ) -> Result<Self> {
        if classes.len() != covariances.len() || classes.is_empty() {
            return Err(ReduError::invalid("need one covariance per class"));
        }
        let d = covariances[0].nrows();
        if r == 0 || r > d {
            return Err(ReduError::invalid(format!("rank {r} outside 1..={d}")));
        }
        let mut bases = Vec::with_capacity(classes.len());
        for cov in covariances {
            if cov.dim() != (d, d) {
                return Err(ReduError::invalid("covariances differ in shape"));
            }
            let (_, vecs) = sym_eigen_desc(cov)?;
            let mut u = vecs.slice(s![.., 0..r]).to_owned();
            for mut col in u.columns_mut() {
                if let Some(&first) = col.iter().find(|v| **v != 0.0) {
                    if first < 0.0 {
                        col.mapv_inplace(|v| -v);
                    }
                }
            }
            bases.push(u);
        }
        Ok(ClassSubspaces {
            classes: classes.to_vec(),
            rank: r,
            bases,
        })
    }

    pub fn dim(&self) -> usize {
        self.bases[0].nrows()
    }

    /// `‖z‖² − ‖Uᵀz‖²` per class, clamped at zero.
    pub fn residuals(&self, z: ArrayView1<f64>) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(ReduError::invalid(format!(
                "feature has dimension {}, subspaces have {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ReduError::invalid("feature has non-finite entries"));
        }
        let zz = z.dot(&z);
        Ok(self
            .bases
            .iter()
            .map(|u| {
                let p = u.t().dot(&z);
                (zz - p.dot(&p)).max(0.0)
            })
            .collect())
    }
}

/// Principal subspaces of a model's final covariances.
pub fn fit_subspaces(model: &ReduNetModel, r: usize) -> Result<ClassSubspaces> {
    ClassSubspaces::from_covariances(&model.registry(), &model.final_covariances, r)
}

/// Class with the smallest residual; the earliest registered class wins ties.
pub fn classify(z: ArrayView1<f64>, subspaces: &ClassSubspaces) -> Result<ClassId> {
    let res = subspaces.residuals(z)?;
    let lowest = res.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = TIE_TOL * z.dot(&z);
    let j = res
        .iter()
        .position(|&v| v <= lowest + tol)
        .expect("at least one class");
    Ok(subspaces.classes[j])
}

/// [`classify`] for every column of already-transformed features.
pub fn predict(features: &SampleMatrix, subspaces: &ClassSubspaces) -> Result<Vec<ClassId>> {
    (0..features.len())
        .map(|i| classify(features.column(i), subspaces))
        .collect()
}

/// Fraction of predictions that equal the labels. Every label must be one of
/// the subspaces' classes.
pub fn accuracy(predicted: &[ClassId], labels: &LabelAssignment, known: &[ClassId]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(ReduError::invalid(
            "prediction count differs from label count",
        ));
    }
    if let Some(c) = labels.registry().iter().find(|c| !known.contains(c)) {
        return Err(ReduError::invalid(format!(
            "label {c} is not a class of the model"
        )));
    }
    let hits = predicted
        .iter()
        .zip(labels.labels())
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Accuracy of nearest-subspace classification after the forward transform.
pub fn evaluate(
    model: &ReduNetModel,
    subspaces: &ClassSubspaces,
    x_test: &SampleMatrix,
    labels: &LabelAssignment,
) -> Result<f64> {
    labels.check_samples(x_test)?;
    if let Some(c) = labels
        .registry()
        .iter()
        .find(|c| !subspaces.classes.contains(c))
    {
        return Err(ReduError::invalid(format!(
            "label {c} is not a class of the model"
        )));
    }
    let z = forward_batch(model, x_test)?;
    accuracy(&predict(&z, subspaces)?, labels, &subspaces.classes)
}
