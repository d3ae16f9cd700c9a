//! Feature matrices and hard class assignments.

use std::collections::HashMap;
use std::fmt;

use ndarray::{concatenate, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ReduError, Result};

/// Identifier of a class as it appears in the source dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for ClassId {
    fn from(v: u32) -> Self {
        ClassId(v)
    }
}

/// A `d × m` matrix whose columns are samples. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    data: Array2<f64>,
}

impl SampleMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (d, m) = data.dim();
        if d == 0 || m == 0 {
            return Err(ReduError::invalid(format!(
                "sample matrix must be non-empty, got {d}x{m}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ReduError::invalid(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(SampleMatrix { data })
    }

    /// Build from a list of samples, each of length `d`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let m = columns.len();
        let d = columns.first().map(|c| c.len()).unwrap_or(0);
        if columns.iter().any(|c| c.len() != d) {
            return Err(ReduError::invalid("samples have differing lengths"));
        }
        let data = Array2::from_shape_fn((d, m), |(i, j)| columns[j][i]);
        SampleMatrix::new(data)
    }

    /// Ambient dimension `d`.
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// Number of samples `m`.
    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.column(i)
    }

    pub fn columns_vec(&self) -> Vec<Vec<f64>> {
        self.data
            .columns()
            .into_iter()
            .map(|c| c.to_vec())
            .collect()
    }

    /// Copy of the listed columns, in the listed order.
    pub fn select(&self, columns: &[usize]) -> Result<SampleMatrix> {
        if columns.iter().any(|&c| c >= self.len()) {
            return Err(ReduError::invalid("column index out of range"));
        }
        SampleMatrix::new(self.data.select(Axis(1), columns))
    }

    /// Horizontal concatenation `[a | b | ...]`.
    pub fn hstack(parts: &[&SampleMatrix]) -> Result<SampleMatrix> {
        let d = parts
            .first()
            .ok_or_else(|| ReduError::invalid("nothing to concatenate"))?
            .dim();
        if parts.iter().any(|p| p.dim() != d) {
            return Err(ReduError::invalid("dimension mismatch in concatenation"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let data = concatenate(Axis(1), &views)
            .map_err(|e| ReduError::invalid(format!("concatenation failed: {e}")))?;
        SampleMatrix::new(data)
    }
}

/// Hard class labels plus the ordered class registry they refer to.
///
/// Position `j` in the registry is the row of the membership matrix `Π^j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAssignment {
    labels: Vec<ClassId>,
    registry: Vec<ClassId>,
    counts: Vec<usize>,
    positions: Vec<usize>,
}

impl LabelAssignment {
    /// Registry in order of first appearance.
    pub fn new(labels: Vec<ClassId>) -> Result<Self> {
        let mut registry = Vec::new();
        for &l in &labels {
            if !registry.contains(&l) {
                registry.push(l);
            }
        }
        Self::with_registry(labels, registry)
    }

    /// Use an explicit registry order; every registered class must occur.
    pub fn with_registry(labels: Vec<ClassId>, registry: Vec<ClassId>) -> Result<Self> {
        if labels.is_empty() {
            return Err(ReduError::invalid("label assignment is empty"));
        }
        let mut index = HashMap::with_capacity(registry.len());
        for (j, &c) in registry.iter().enumerate() {
            if index.insert(c, j).is_some() {
                return Err(ReduError::invalid(format!("class {c} registered twice")));
            }
        }
        let mut counts = vec![0usize; registry.len()];
        let mut positions = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let j = *index.get(l).ok_or_else(|| {
                ReduError::invalid(format!("label {l} of sample {i} is not registered"))
            })?;
            counts[j] += 1;
            positions.push(j);
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(ReduError::invalid(format!(
                "class {} has no samples",
                registry[j]
            )));
        }
        Ok(LabelAssignment {
            labels,
            registry,
            counts,
            positions,
        })
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn registry(&self) -> &[ClassId] {
        &self.registry
    }

    /// `m_j` per registered class.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Registry position of every sample.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn num_classes(&self) -> usize {
        self.registry.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position_of(&self, class: ClassId) -> Option<usize> {
        self.registry.iter().position(|&c| c == class)
    }

    /// Column indices of each registered class, in sample order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.registry.len()];
        for (i, &j) in self.positions.iter().enumerate() {
            out[j].push(i);
        }
        out
    }

    /// Labels of `self` followed by labels of `other`; registries are concatenated.
    pub fn concat(&self, other: &LabelAssignment) -> Result<LabelAssignment> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut registry = self.registry.clone();
        registry.extend_from_slice(&other.registry);
        LabelAssignment::with_registry(labels, registry)
    }

    pub(crate) fn check_samples(&self, z: &SampleMatrix) -> Result<()> {
        if self.len() != z.len() {
            return Err(ReduError::invalid(format!(
                "{} labels for {} samples",
                self.len(),
                z.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(v: &[u32]) -> Vec<ClassId> {
        v.iter().copied().map(ClassId).collect()
    }

    #[test]
    fn registry_follows_first_appearance() {
        let l = LabelAssignment::new(ids(&[3, 1, 3, 2, 1])).unwrap();
        assert_eq!(l.registry(), ids(&[3, 1, 2]).as_slice());
        assert_eq!(l.counts(), &[2, 2, 1]);
        assert_eq!(l.positions(), &[0, 1, 0, 2, 1]);
        assert_eq!(l.members()[1], vec![1, 4]);
    }

    #[test]
    fn unknown_label_and_empty_class_rejected() {
        assert!(LabelAssignment::with_registry(ids(&[1, 5]), ids(&[1])).is_err());
        assert!(LabelAssignment::with_registry(ids(&[1, 1]), ids(&[1, 2])).is_err());
        assert!(LabelAssignment::with_registry(ids(&[1]), ids(&[1, 1])).is_err());
    }

    #[test]
    fn sample_matrix_rejects_non_finite_and_empty() {
        assert!(SampleMatrix::new(array![[1.0, f64::NAN]]).is_err());
        assert!(SampleMatrix::new(Array2::zeros((0, 3))).is_err());
        assert!(SampleMatrix::new(Array2::zeros((2, 0))).is_err());
    }

    #[test]
    fn from_columns_is_column_major() {
        let z =
            SampleMatrix::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(z.dim(), 2);
        assert_eq!(z.len(), 3);
        assert_eq!(z.column(1).to_vec(), vec![3.0, 4.0]);
    }
}
