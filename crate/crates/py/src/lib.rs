//! Python bindings. Samples cross the boundary as lists of columns, one
//! list of floats per sample; matrices as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use redunet::container::{load_model, save_model};
use redunet::subspace::accuracy;
use redunet::{
    BuildConfig, ClassId, LabelAssignment, ReduError, ReduNetModel, SampleMatrix, TaskBatch,
};

create_exception!(redunet, RedunetError, PyException);

fn err(e: ReduError) -> PyErr {
    RedunetError::new_err(e.to_string())
}

fn samples(columns: &[Vec<f64>]) -> PyResult<SampleMatrix> {
    SampleMatrix::from_columns(columns).map_err(err)
}

fn labels(ids: &[u32]) -> PyResult<LabelAssignment> {
    LabelAssignment::new(ids.iter().copied().map(ClassId).collect()).map_err(err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(RedunetError::new_err("ragged matrix rows"));
    }
    Array2::from_shape_vec((n, m), rows.concat()).map_err(|e| RedunetError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// A constructed network.
#[pyclass(frozen, module = "redunet")]
struct Model {
    inner: ReduNetModel,
}

#[pymethods]
impl Model {
    /// Build from training samples. Returns `(model, delta_r_per_layer)`.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (columns, class_ids, depth=200, epsilon=0.5, eta0=0.5, eta_decay=0.933, lambda_=1.0))]
    fn build(
        py: Python<'_>,
        columns: Vec<Vec<f64>>,
        class_ids: Vec<u32>,
        depth: usize,
        epsilon: f64,
        eta0: f64,
        eta_decay: f64,
        lambda_: f64,
    ) -> PyResult<(Model, Vec<f64>)> {
        let x = samples(&columns)?;
        let l = labels(&class_ids)?;
        let cfg = BuildConfig {
            epsilon,
            depth,
            eta0,
            eta_decay,
            lambda: lambda_,
        };
        let (inner, trace) = py
            .detach(|| redunet::build_redunet(&x, &l, &cfg))
            .map_err(err)?;
        Ok((Model { inner }, trace.delta_r))
    }

    /// Merge samples of new classes, returning a new model.
    fn merge(
        &self,
        py: Python<'_>,
        columns: Vec<Vec<f64>>,
        class_ids: Vec<u32>,
    ) -> PyResult<Model> {
        let task = TaskBatch::new(samples(&columns)?, labels(&class_ids)?).map_err(err)?;
        let inner = py
            .detach(|| redunet::merge_new_task(&self.inner, &task))
            .map_err(err)?;
        Ok(Model { inner })
    }

    /// Features after the last layer, one list per sample.
    fn forward(&self, py: Python<'_>, columns: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = samples(&columns)?;
        let z = py
            .detach(|| redunet::forward_batch(&self.inner, &x))
            .map_err(err)?;
        Ok(z.columns_vec())
    }

    /// Membership probabilities at every layer for one sample.
    fn memberships(&self, sample: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let trace =
            redunet::forward_trace(&self.inner, ndarray::ArrayView1::from(&sample)).map_err(err)?;
        Ok(trace.memberships.into_iter().map(|m| m.probs).collect())
    }

    /// Class ids by nearest rank-`rank` class subspace of the output features.
    fn predict(&self, py: Python<'_>, columns: Vec<Vec<f64>>, rank: usize) -> PyResult<Vec<u32>> {
        let x = samples(&columns)?;
        py.detach(|| {
            let subs = redunet::fit_subspaces(&self.inner, rank)?;
            let z = redunet::forward_batch(&self.inner, &x)?;
            redunet::predict(&z, &subs)
        })
        .map(|p| p.into_iter().map(|c| c.0).collect())
        .map_err(err)
    }

    /// Fraction of samples predicted correctly.
    fn accuracy(&self, columns: Vec<Vec<f64>>, class_ids: Vec<u32>, rank: usize) -> PyResult<f64> {
        let l = labels(&class_ids)?;
        let subs = redunet::fit_subspaces(&self.inner, rank).map_err(err)?;
        let z = redunet::forward_batch(&self.inner, &samples(&columns)?).map_err(err)?;
        let predicted = redunet::predict(&z, &subs).map_err(err)?;
        accuracy(&predicted, &l, &self.inner.registry()).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        load_model(&path).map(|inner| Model { inner }).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    /// `(class_id, sample_count)` in registry order.
    #[getter]
    fn classes(&self) -> Vec<(u32, usize)> {
        self.inner
            .classes
            .iter()
            .map(|c| (c.id.0, c.count))
            .collect()
    }

    fn etas(&self) -> Vec<f64> {
        self.inner.etas()
    }

    fn final_rate_reduction(&self) -> PyResult<f64> {
        self.inner.final_rate_reduction().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(dim={}, depth={}, classes={})",
            self.inner.dim,
            self.inner.depth(),
            self.inner.num_classes()
        )
    }
}

#[pyfunction]
fn coding_rate(columns: Vec<Vec<f64>>, epsilon: f64) -> PyResult<f64> {
    redunet::coding_rate(&samples(&columns)?, epsilon).map_err(err)
}

#[pyfunction]
fn rate_reduction(columns: Vec<Vec<f64>>, class_ids: Vec<u32>, epsilon: f64) -> PyResult<f64> {
    redunet::rate_reduction(&samples(&columns)?, &labels(&class_ids)?, epsilon).map_err(err)
}

#[pyfunction]
fn compression_matrix(sigma: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    redunet::compression_matrix(&matrix(&sigma)?, alpha)
        .map(|c| rows(&c))
        .map_err(err)
}

#[pyfunction]
fn recover_covariance(c: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    redunet::recover_covariance(&matrix(&c)?, alpha)
        .map(|s| rows(&s))
        .map_err(err)
}

/// Samples from `k` orthogonal rank-`r` subspaces of `R^d` plus Gaussian
/// noise. Returns `(columns, class_ids)`.
#[pyfunction]
#[pyo3(signature = (dim, classes, rank, counts, noise, seed))]
fn synth_subspace_mixture(
    dim: usize,
    classes: usize,
    rank: usize,
    counts: Vec<usize>,
    noise: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
    let (x, l) = redunet::data::synth_subspace_mixture(dim, classes, rank, &counts, noise, seed)
        .map_err(err)?;
    Ok((x.columns_vec(), l.labels().iter().map(|c| c.0).collect()))
}

#[pymodule]
#[pyo3(name = "redunet")]
fn redunet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RedunetError", m.py().get_type::<RedunetError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(coding_rate, m)?)?;
    m.add_function(wrap_pyfunction!(rate_reduction, m)?)?;
    m.add_function(wrap_pyfunction!(compression_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(recover_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(synth_subspace_mixture, m)?)?;
    Ok(())
}
