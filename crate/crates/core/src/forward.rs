//! Test-time transform: samples move through the layers with estimated
//! class membership and are kept on the unit sphere.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{ReduError, Result};
use crate::linalg::apply_columns;
use crate::model::{Layer, LayerSink, ReduNetModel};
use crate::sample::SampleMatrix;

/// Columns pushed through a layer at once.
const CHUNK: usize = 256;

/// Soft assignment of one sample to the `k` classes of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipEstimate {
    pub probs: Vec<f64>,
}

impl MembershipEstimate {
    /// `softmax(−λk·‖C_j z‖)`, shifted by the largest exponent.
    pub fn from_norms(norms: &[f64], lambda: f64) -> Self {
        let scale = lambda * norms.len() as f64;
        let logits: Vec<f64> = norms.iter().map(|n| -scale * n).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        MembershipEstimate {
            probs: weights.iter().map(|w| w / total).collect(),
        }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = j;
            }
        }
        best
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(ReduError::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(())
}

fn column_norm(m: &Array2<f64>, col: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..m.nrows() {
        let v = m[[r, col]];
        s += v * v;
    }
    s.sqrt()
}

/// Membership of `z` under `layer`.
pub fn estimate_membership(
    z: ArrayView1<f64>,
    layer: &Layer,
    lambda: f64,
) -> Result<MembershipEstimate> {
    check_lambda(lambda)?;
    if z.len() != layer.dim() {
        return Err(ReduError::invalid(format!(
            "sample has dimension {}, layer expects {}",
            z.len(),
            layer.dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ReduError::invalid("sample has non-finite entries"));
    }
    let col = z.to_owned().insert_axis(ndarray::Axis(1));
    let norms: Vec<f64> = layer
        .compression
        .iter()
        .map(|c| column_norm(&apply_columns(c.view(), col.view()), 0))
        .collect();
    Ok(MembershipEstimate::from_norms(&norms, lambda))
}

/// Scale every column to unit length; a zero column is degenerate.
fn unit_columns(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut z = x.to_owned();
    for j in 0..z.ncols() {
        let n = column_norm(&z, j);
        if !(n > 0.0) {
            return Err(ReduError::Degenerate(format!(
                "sample {j} is the zero vector"
            )));
        }
        for r in 0..z.nrows() {
            z[[r, j]] /= n;
        }
    }
    Ok(z)
}

/// Apply one layer to unit-norm columns in place. When `memberships` is
/// given, the estimate used for each column is appended to it.
fn step(
    z: &mut Array2<f64>,
    layer: &Layer,
    lambda: f64,
    index: usize,
    mut memberships: Option<&mut Vec<MembershipEstimate>>,
) -> Result<()> {
    let (d, n) = z.dim();
    if d != layer.dim() {
        return Err(ReduError::invalid(format!(
            "features have dimension {d}, layer {index} expects {}",
            layer.dim()
        )));
    }
    let k = layer.num_classes();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let block = z.slice(ndarray::s![.., start..end]);
        let ez = apply_columns(layer.expansion.view(), block);
        let cz: Vec<Array2<f64>> = layer
            .compression
            .iter()
            .map(|c| apply_columns(c.view(), block))
            .collect();
        for c in 0..end - start {
            let norms: Vec<f64> = cz.iter().map(|m| column_norm(m, c)).collect();
            let est = MembershipEstimate::from_norms(&norms, lambda);
            let col = start + c;
            let mut sq = 0.0;
            for r in 0..d {
                let mut shrink = 0.0;
                for j in 0..k {
                    shrink += layer.gamma[j] * est.probs[j] * cz[j][[r, c]];
                }
                let v = z[[r, col]] + layer.eta * (ez[[r, c]] - shrink);
                z[[r, col]] = v;
                sq += v * v;
            }
            let norm = sq.sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(ReduError::Divergence {
                    layer: index,
                    detail: format!("sample {col} reached norm {norm}"),
                });
            }
            for r in 0..d {
                z[[r, col]] /= norm;
            }
            if let Some(out) = memberships.as_deref_mut() {
                out.push(est);
            }
        }
        start = end;
    }
    Ok(())
}

/// Pushes a fixed batch through layers as they are handed over, so a model
/// never has to be held in memory to be evaluated.
pub struct ForwardSink {
    state: Array2<f64>,
    lambda: f64,
    layers_seen: usize,
}

impl ForwardSink {
    pub fn new(x: &SampleMatrix, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(ForwardSink {
            state: unit_columns(x.view())?,
            lambda,
            layers_seen: 0,
        })
    }

    pub fn layers_seen(&self) -> usize {
        self.layers_seen
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.state.view()
    }

    pub fn finish(self) -> Result<SampleMatrix> {
        SampleMatrix::new(self.state)
    }
}

impl LayerSink for ForwardSink {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        step(&mut self.state, layer, self.lambda, index, None)?;
        self.layers_seen += 1;
        Ok(())
    }
}

/// `z_L` for one sample. Scale-invariant in `x`; the result has unit norm.
pub fn forward_sample(model: &ReduNetModel, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != model.dim {
        return Err(ReduError::invalid(format!(
            "sample has dimension {}, model expects {}",
            x.len(),
            model.dim
        )));
    }
    let col = x.to_owned().insert_axis(ndarray::Axis(1));
    let z = forward_batch(model, &SampleMatrix::new(col)?)?;
    Ok(z.column(0).to_owned())
}

/// [`forward_sample`] on every column; each column's result is bit-identical
/// to the single-sample call.
pub fn forward_batch(model: &ReduNetModel, x: &SampleMatrix) -> Result<SampleMatrix> {
    if x.dim() != model.dim {
        return Err(ReduError::invalid(format!(
            "samples have dimension {}, model expects {}",
            x.dim(),
            model.dim
        )));
    }
    let mut sink = ForwardSink::new(x, model.lambda)?;
    for (l, layer) in model.layers.iter().enumerate() {
        sink.push_layer(l, layer)?;
    }
    sink.finish()
}

/// Every intermediate feature and the memberships used to reach it.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `z_0 ..= z_L`.
    pub features: Vec<Array1<f64>>,
    /// Estimate at layer `ℓ`, for `ℓ = 0..L`.
    pub memberships: Vec<MembershipEstimate>,
}

pub fn forward_trace(model: &ReduNetModel, x: ArrayView1<f64>) -> Result<ForwardTrace> {
    if x.len() != model.dim {
        return Err(ReduError::invalid("sample dimension differs from model"));
    }
    check_lambda(model.lambda)?;
    let mut z = unit_columns(x.insert_axis(ndarray::Axis(1)))?;
    let mut features = vec![z.column(0).to_owned()];
    let mut memberships = Vec::with_capacity(model.depth());
    for (l, layer) in model.layers.iter().enumerate() {
        step(&mut z, layer, model.lambda, l, Some(&mut memberships))?;
        features.push(z.column(0).to_owned());
    }
    Ok(ForwardTrace {
        features,
        memberships,
    })
}
