//! Adding a task's classes to an existing network without its earlier data.
//!
//! Old classes are represented only by their second moments. These are
//! recovered from the layer-0 compression operators, then carried through
//! the layers as `Σ ← L_j Σ L_jᵀ`, rescaled to trace `m_j`, which is exactly
//! what the feature update does to `Z_j Z_jᵀ`.

use ndarray::Array2;

use crate::build::{advance_blocks, class_blocks, layer_from_covariances, BuildTrace};
use crate::error::{ReduError, Result};
use crate::linalg;
use crate::model::{ClassEntry, Layer, LayerSink, ModelHead, ReduNetModel};
use crate::rate::{self, CodingParams};
use crate::sample::{ClassId, LabelAssignment, SampleMatrix};

/// Negative-eigenvalue allowance for propagated second moments.
const PSD_TOL: f64 = 1e-8;
const ALPHA_REL_TOL: f64 = 1e-12;

/// Labeled samples of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub features: SampleMatrix,
    pub labels: LabelAssignment,
}

impl TaskBatch {
    pub fn new(features: SampleMatrix, labels: LabelAssignment) -> Result<Self> {
        labels.check_samples(&features)?;
        Ok(TaskBatch { features, labels })
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }
}

/// Per-class second moments standing in for classes whose data is gone.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceLedger {
    pub classes: Vec<ClassEntry>,
    pub covariances: Vec<Array2<f64>>,
}

impl CovarianceLedger {
    /// Move every entry through `layer`; entry `j` uses the layer's class `j`.
    fn propagate(&mut self, layer: &Layer, layer_index: usize) -> Result<()> {
        for (j, sigma) in self.covariances.iter_mut().enumerate() {
            let class = self.classes[j];
            let l = layer.class_transition(j);
            let mut t = l.dot(&*sigma).dot(&l.t());
            linalg::symmetrize(&mut t);
            let tr = linalg::trace(t.view());
            if !(tr > 0.0 && tr.is_finite()) {
                return Err(ReduError::Degradation {
                    layer: layer_index,
                    class: class.id.0,
                    detail: format!("propagated trace {tr}"),
                });
            }
            t *= class.count as f64 / tr;
            if !linalg::is_psd_within(&t, PSD_TOL) {
                return Err(ReduError::Degradation {
                    layer: layer_index,
                    class: class.id.0,
                    detail: format!("eigenvalue below -{PSD_TOL:e}"),
                });
            }
            *sigma = t;
        }
        Ok(())
    }
}

/// Recover `Σ_0^j = Z_0^j Z_0^{jᵀ}` for every class of a model.
///
/// `counts` must be the class sizes the model was built with; they are
/// checked against the stored `α_j`. A model without layers hands back its
/// final covariances, which are then the layer-0 moments.
pub fn recover_initial_covariances(head: &ModelHead, counts: &[usize]) -> Result<CovarianceLedger> {
    if counts.len() != head.classes.len() {
        return Err(ReduError::InconsistentParameter(format!(
            "{} counts for {} classes",
            counts.len(),
            head.classes.len()
        )));
    }
    let classes: Vec<ClassEntry> = head
        .classes
        .iter()
        .zip(counts)
        .map(|(c, &count)| ClassEntry { id: c.id, count })
        .collect();
    let covariances = match &head.first_layer {
        None => {
            if head.depth() > 0 {
                return Err(ReduError::invalid("model head is missing its first layer"));
            }
            if counts != head.class_counts().as_slice() {
                return Err(ReduError::InconsistentParameter(
                    "class counts differ from the model registry".into(),
                ));
            }
            head.final_covariances.clone()
        }
        Some(layer) => {
            let params = CodingParams::new(head.dim, counts, head.epsilon)?;
            let mut out = Vec::with_capacity(counts.len());
            for (j, c) in layer.compression.iter().enumerate() {
                let stored = layer.alpha_classes[j];
                let expected = params.alpha_classes[j];
                if (stored - expected).abs() > ALPHA_REL_TOL * expected {
                    return Err(ReduError::InconsistentParameter(format!(
                        "class {} was built with α_j = {stored}, count {} implies {expected}",
                        classes[j].id, counts[j]
                    )));
                }
                out.push(rate::recover_covariance(c, stored)?);
            }
            out
        }
    };
    Ok(CovarianceLedger {
        classes,
        covariances,
    })
}

/// Merge `task` into the model described by `head`, handing each new layer
/// to `sink`. Returns the merged head and its `ΔR` trace.
pub fn merge_streaming(
    head: &ModelHead,
    task: &TaskBatch,
    sink: &mut dyn LayerSink,
) -> Result<(ModelHead, BuildTrace)> {
    if task.dim() != head.dim {
        return Err(ReduError::invalid(format!(
            "task has dimension {}, model has {}",
            task.dim(),
            head.dim
        )));
    }
    let old: Vec<ClassId> = head.registry();
    if let Some(c) = task.labels.registry().iter().find(|c| old.contains(c)) {
        return Err(ReduError::invalid(format!(
            "class {c} is already in the model"
        )));
    }
    let mut ledger = recover_initial_covariances(head, &head.class_counts())?;
    let offset = ledger.classes.len();

    let mut classes = ledger.classes.clone();
    classes.extend(
        task.labels
            .registry()
            .iter()
            .zip(task.labels.counts())
            .map(|(&id, &count)| ClassEntry { id, count }),
    );
    let counts: Vec<usize> = classes.iter().map(|c| c.count).collect();
    let params = CodingParams::new(head.dim, &counts, head.epsilon)?;

    let z0 = rate::normalize_classwise(&task.features, &task.labels)?;
    let mut blocks = class_blocks(&z0, &task.labels);
    drop(z0);

    let mut trace = BuildTrace::default();
    let mut first_layer = None;
    for (l, &eta) in head.etas.iter().enumerate() {
        let mut covs = ledger.covariances.clone();
        covs.extend(blocks.iter().map(|b| linalg::gram(b.view())));
        let (layer, delta_r) =
            layer_from_covariances(&covs, &params, eta).map_err(|e| match e {
                ReduError::Numerical(detail) => ReduError::Divergence { layer: l, detail },
                other => other,
            })?;
        drop(covs);
        trace.delta_r.push(delta_r);
        ledger.propagate(&layer, l)?;
        advance_blocks(&mut blocks, &layer, offset, l)?;
        sink.push_layer(l, &layer)?;
        if l == 0 {
            first_layer = Some(layer);
        }
    }
    let mut final_covariances = ledger.covariances;
    final_covariances.extend(blocks.iter().map(|b| linalg::gram(b.view())));
    trace.delta_r.push(rate::rate_reduction_from_covariances(
        &final_covariances,
        &params,
    )?);

    Ok((
        ModelHead {
            dim: head.dim,
            epsilon: head.epsilon,
            lambda: head.lambda,
            classes,
            etas: head.etas.clone(),
            first_layer,
            final_covariances,
            input: head.input.clone(),
        },
        trace,
    ))
}

/// Merge one task into an in-memory model.
pub fn merge_new_task(model: &ReduNetModel, task: &TaskBatch) -> Result<ReduNetModel> {
    let mut layers = Vec::with_capacity(model.depth());
    let (head, _) = merge_streaming(&model.head(), task, &mut layers)?;
    ReduNetModel::from_parts(head, layers)
}

/// Merge tasks one after another. Each task is dropped once merged.
pub fn chain_merge(model: ReduNetModel, tasks: Vec<TaskBatch>) -> Result<ReduNetModel> {
    let mut current = model;
    for task in tasks {
        current = merge_new_task(&current, &task)?;
    }
    Ok(current)
}
