//! Layer-by-layer construction from labeled data.
//!
//! Each layer is one projected gradient-ascent step on `ΔR`: with the class
//! memberships known, class `j` moves by `Z_j ← L_j Z_j` (see
//! [`Layer::class_transition`]) and is then rescaled to `‖Z_j‖²_F = m_j`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::InputTransform;
use crate::error::{ReduError, Result};
use crate::linalg;
use crate::model::{ClassEntry, Layer, LayerSink, ModelHead, ReduNetModel};
use crate::rate::{self, CodingParams};
use crate::sample::{LabelAssignment, SampleMatrix};

/// Construction hyperparameters. Layer `ℓ` uses step `eta0 · eta_decay^ℓ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub epsilon: f64,
    pub depth: usize,
    pub eta0: f64,
    pub eta_decay: f64,
    pub lambda: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            epsilon: 0.5,
            depth: 200,
            eta0: 0.5,
            eta_decay: 0.933,
            lambda: 1.0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        rate::check_epsilon(self.epsilon)?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.eta0) || !positive(self.lambda) {
            return Err(ReduError::invalid("eta0 and lambda must be positive"));
        }
        if !positive(self.eta_decay) || self.eta_decay > 1.0 {
            return Err(ReduError::invalid("eta_decay must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn eta(&self, layer: usize) -> f64 {
        self.eta0 * self.eta_decay.powi(layer as i32)
    }

    pub fn etas(&self) -> Vec<f64> {
        (0..self.depth).map(|l| self.eta(l)).collect()
    }
}

/// `ΔR(Z_ℓ)` for `ℓ = 0..=L`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildTrace {
    pub delta_r: Vec<f64>,
}

/// Build a layer from per-class second moments, returning it with `ΔR` of
/// those moments. Classes are taken in registry order, and so is the sum
/// forming the total second moment.
pub fn layer_from_covariances(
    class_covs: &[Array2<f64>],
    params: &CodingParams,
    eta: f64,
) -> Result<(Layer, f64)> {
    if class_covs.len() != params.num_classes() {
        return Err(ReduError::invalid(
            "covariance count differs from class count",
        ));
    }
    let total = rate::total_covariance(class_covs)?;
    let expansion = rate::coding_operator(&total, params.alpha)?;
    let mut delta_r = expansion.half_logdet;
    let mut compression = Vec::with_capacity(class_covs.len());
    for (j, cov) in class_covs.iter().enumerate() {
        let op = rate::coding_operator(cov, params.alpha_classes[j])?;
        delta_r -= params.gamma[j] * op.half_logdet;
        compression.push(op.matrix);
    }
    Ok((
        Layer {
            eta,
            expansion: expansion.matrix,
            compression,
            gamma: params.gamma.clone(),
            alpha: params.alpha,
            alpha_classes: params.alpha_classes.clone(),
        },
        delta_r,
    ))
}

/// Apply the known-membership update to per-class feature blocks.
/// `offset` is the registry position of `blocks[0]`.
pub(crate) fn advance_blocks(
    blocks: &mut [Array2<f64>],
    layer: &Layer,
    offset: usize,
    layer_index: usize,
) -> Result<()> {
    for (i, block) in blocks.iter_mut().enumerate() {
        let moved = layer.class_transition(offset + i).dot(&*block);
        *block = moved;
        rate::normalize_block(block).map_err(|detail| ReduError::Divergence {
            layer: layer_index,
            detail: format!("class position {}: {detail}", offset + i),
        })?;
        if block.iter().any(|v| !v.is_finite()) {
            return Err(ReduError::Divergence {
                layer: layer_index,
                detail: format!("class position {} has non-finite features", offset + i),
            });
        }
    }
    Ok(())
}

pub(crate) fn class_blocks(z: &SampleMatrix, labels: &LabelAssignment) -> Vec<Array2<f64>> {
    labels
        .members()
        .iter()
        .map(|cols| z.data().select(Axis(1), cols))
        .collect()
}

/// Construct a network, handing each layer to `sink` as soon as it exists.
pub fn build_streaming(
    x: &SampleMatrix,
    labels: &LabelAssignment,
    cfg: &BuildConfig,
    sink: &mut dyn LayerSink,
) -> Result<(ModelHead, BuildTrace)> {
    cfg.validate()?;
    labels.check_samples(x)?;
    let params = CodingParams::new(x.dim(), labels.counts(), cfg.epsilon)?;
    let z0 = rate::normalize_classwise(x, labels)?;
    let mut blocks = class_blocks(&z0, labels);
    drop(z0);

    let mut trace = BuildTrace::default();
    let mut first_layer = None;
    for l in 0..cfg.depth {
        let covs: Vec<_> = blocks.iter().map(|b| linalg::gram(b.view())).collect();
        let (layer, delta_r) =
            layer_from_covariances(&covs, &params, cfg.eta(l)).map_err(|e| at_layer(e, l))?;
        trace.delta_r.push(delta_r);
        advance_blocks(&mut blocks, &layer, 0, l)?;
        sink.push_layer(l, &layer)?;
        if l == 0 {
            first_layer = Some(layer);
        }
    }
    let final_covariances: Vec<_> = blocks.iter().map(|b| linalg::gram(b.view())).collect();
    trace.delta_r.push(rate::rate_reduction_from_covariances(
        &final_covariances,
        &params,
    )?);

    let head = ModelHead {
        dim: x.dim(),
        epsilon: cfg.epsilon,
        lambda: cfg.lambda,
        classes: labels
            .registry()
            .iter()
            .zip(labels.counts())
            .map(|(&id, &count)| ClassEntry { id, count })
            .collect(),
        etas: cfg.etas(),
        first_layer,
        final_covariances,
        input: InputTransform::Identity,
    };
    Ok((head, trace))
}

/// Construct a network in memory.
pub fn build_redunet(
    x: &SampleMatrix,
    labels: &LabelAssignment,
    cfg: &BuildConfig,
) -> Result<(ReduNetModel, BuildTrace)> {
    let mut layers = Vec::with_capacity(cfg.depth);
    let (head, trace) = build_streaming(x, labels, cfg, &mut layers)?;
    Ok((ReduNetModel::from_parts(head, layers)?, trace))
}

/// One training-time layer: `Z_j ← L_j Z_j`, then class-wise normalization.
pub fn layer_forward_train(
    z: &SampleMatrix,
    labels: &LabelAssignment,
    layer: &Layer,
) -> Result<SampleMatrix> {
    labels.check_samples(z)?;
    if z.dim() != layer.dim() {
        return Err(ReduError::invalid(format!(
            "features have dimension {}, layer expects {}",
            z.dim(),
            layer.dim()
        )));
    }
    if labels.num_classes() != layer.num_classes() {
        return Err(ReduError::invalid(format!(
            "{} classes labeled, layer has {}",
            labels.num_classes(),
            layer.num_classes()
        )));
    }
    let transitions: Vec<_> = (0..layer.num_classes())
        .map(|j| layer.class_transition(j))
        .collect();
    let mut out = Array2::zeros(z.data().dim());
    for (i, &j) in labels.positions().iter().enumerate() {
        out.column_mut(i).assign(&transitions[j].dot(&z.column(i)));
    }
    rate::normalize_classwise(&SampleMatrix::new(out)?, labels)
}

fn at_layer(e: ReduError, layer: usize) -> ReduError {
    match e {
        ReduError::Numerical(detail) | ReduError::InvalidInput(detail) => {
            ReduError::Divergence { layer, detail }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::sample::ClassId;
    use ndarray::array;

    fn two_lines() -> (SampleMatrix, LabelAssignment) {
        let x = array![
            [1.0, 0.9, 1.1, 0.0, 0.1, -0.1],
            [0.0, 0.1, -0.1, 1.0, 0.95, 1.05]
        ];
        let labels =
            LabelAssignment::new([0u32, 0, 0, 1, 1, 1].iter().copied().map(ClassId).collect())
                .unwrap();
        (SampleMatrix::new(x).unwrap(), labels)
    }

    fn cfg(depth: usize) -> BuildConfig {
        BuildConfig {
            depth,
            ..BuildConfig::default()
        }
    }

    #[test]
    fn schedule_is_geometric() {
        let c = cfg(3);
        assert_eq!(c.etas(), vec![0.5, 0.5 * 0.933, 0.5 * 0.933 * 0.933]);
    }

    #[test]
    fn config_validation() {
        assert!(BuildConfig {
            eta_decay: 1.5,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(BuildConfig {
            lambda: 0.0,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(BuildConfig {
            epsilon: -1.0,
            ..cfg(1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_class_has_flat_zero_trace() {
        let (x, _) = two_lines();
        let one = LabelAssignment::new(vec![ClassId(4); 6]).unwrap();
        let (model, trace) = build_redunet(&x, &one, &cfg(6)).unwrap();
        assert_eq!(model.depth(), 6);
        for v in trace.delta_r {
            assert!(v.abs() < 1e-12, "ΔR = {v}");
        }
    }

    #[test]
    fn separable_lines_trace_is_non_decreasing() {
        let (x, labels) = two_lines();
        let (_, trace) = build_redunet(&x, &labels, &cfg(15)).unwrap();
        assert_eq!(trace.delta_r.len(), 16);
        for w in trace.delta_r.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{:?}", trace.delta_r);
        }
        assert!(trace.delta_r.last().unwrap() > trace.delta_r.first().unwrap());
    }

    #[test]
    fn zero_step_keeps_normalized_features() {
        let (x, labels) = two_lines();
        let (model, _) = build_redunet(&x, &labels, &cfg(1)).unwrap();
        let mut layer = model.layers[0].clone();
        layer.eta = 0.0;
        let z = rate::normalize_classwise(&x, &labels).unwrap();
        let out = layer_forward_train(&z, &labels, &layer).unwrap();
        assert!(max_abs_diff(out.view(), z.view()) < 1e-14);
    }

    #[test]
    fn single_sample_per_class_matches_hand_arithmetic() {
        // z1 = e1, z2 = e2, ε = 0.5: α = 4, α_j = 8, γ_j = ½,
        // E = 4/5·I, C_j = 8·diag(1/9 on e_j, 1 elsewhere).
        // L_1 e1 = (1 + η·4/5 − η·½·8/9) e1; after normalization it is e1 again.
        let x = SampleMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let labels = LabelAssignment::new(vec![ClassId(0), ClassId(1)]).unwrap();
        let (model, _) = build_redunet(&x, &labels, &cfg(1)).unwrap();
        let layer = &model.layers[0];
        assert!(max_abs_diff(layer.expansion.view(), (Array2::<f64>::eye(2) * 0.8).view()) < 1e-15);
        let expected_c0 = array![[8.0 / 9.0, 0.0], [0.0, 8.0]];
        assert!(max_abs_diff(layer.compression[0].view(), expected_c0.view()) < 1e-14);
        let t = layer.class_transition(0);
        let eta = 0.5;
        assert!((t[[0, 0]] - (1.0 + eta * 0.8 - eta * 0.5 * 8.0 / 9.0)).abs() < 1e-15);
        assert!((t[[1, 1]] - (1.0 + eta * 0.8 - eta * 0.5 * 8.0)).abs() < 1e-15);
        let out = layer_forward_train(&x, &labels, layer).unwrap();
        assert!(max_abs_diff(out.view(), x.view()) < 1e-15);
    }

    #[test]
    fn output_keeps_class_norms() {
        let (x, labels) = two_lines();
        let (model, _) = build_redunet(&x, &labels, &cfg(2)).unwrap();
        let z = rate::normalize_classwise(&x, &labels).unwrap();
        let out = layer_forward_train(&z, &labels, &model.layers[0]).unwrap();
        for (j, cols) in labels.members().iter().enumerate() {
            let sq: f64 = cols
                .iter()
                .map(|&c| out.column(c).dot(&out.column(c)))
                .sum();
            assert!((sq - labels.counts()[j] as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn final_covariances_carry_class_sizes() {
        let (x, labels) = two_lines();
        let (model, _) = build_redunet(&x, &labels, &cfg(5)).unwrap();
        for (c, entry) in model.final_covariances.iter().zip(&model.classes) {
            let tr = linalg::trace(c.view());
            assert!((tr - entry.count as f64).abs() <= 1e-8 * entry.count as f64);
        }
    }

    #[test]
    fn degenerate_class_rejected() {
        let x = SampleMatrix::new(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let labels = LabelAssignment::new(vec![ClassId(0), ClassId(1)]).unwrap();
        assert!(matches!(
            build_redunet(&x, &labels, &cfg(2)),
            Err(ReduError::Degenerate(_))
        ));
    }

    #[test]
    fn dimension_mismatch_in_layer_forward() {
        let (x, labels) = two_lines();
        let (model, _) = build_redunet(&x, &labels, &cfg(1)).unwrap();
        let wide = SampleMatrix::new(Array2::ones((3, 6))).unwrap();
        assert!(layer_forward_train(&wide, &labels, &model.layers[0]).is_err());
    }
}
