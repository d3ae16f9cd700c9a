//! Network parameters: layers, the assembled model and the streaming head.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::InputTransform;
use crate::error::{ReduError, Result};
use crate::rate::{self, CodingParams};
use crate::sample::ClassId;

/// One layer: step size, expansion operator and one compression operator per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub eta: f64,
    pub expansion: Array2<f64>,
    pub compression: Vec<Array2<f64>>,
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub alpha_classes: Vec<f64>,
}

impl Layer {
    pub fn dim(&self) -> usize {
        self.expansion.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.compression.len()
    }

    /// `L_j = I + ηE − ηγ_j C_j`, the map applied to class `j`'s features when
    /// its membership is known.
    pub fn class_transition(&self, j: usize) -> Array2<f64> {
        let d = self.dim();
        let mut t = &self.expansion * self.eta;
        t.scaled_add(-self.eta * self.gamma[j], &self.compression[j]);
        for i in 0..d {
            t[[i, i]] += 1.0;
        }
        t
    }

    /// `ΔR` of the features this layer was built from, read back from the
    /// operators: `logdet(I + αΣ) = d·log α − logdet E`.
    pub fn rate_reduction(&self) -> Result<f64> {
        let d = self.dim() as f64;
        let half = |m: &Array2<f64>, a: f64| -> Result<f64> {
            let f = crate::linalg::SpdFactor::new(m)?;
            Ok(0.5 * (d * a.ln() - f.ln_det()))
        };
        let mut r = half(&self.expansion, self.alpha)?;
        for (j, c) in self.compression.iter().enumerate() {
            r -= self.gamma[j] * half(c, self.alpha_classes[j])?;
        }
        Ok(r)
    }

    pub(crate) fn check_shape(&self, dim: usize, classes: usize) -> Result<()> {
        let ok = self.expansion.dim() == (dim, dim)
            && self.compression.len() == classes
            && self.compression.iter().all(|c| c.dim() == (dim, dim))
            && self.gamma.len() == classes
            && self.alpha_classes.len() == classes;
        if ok {
            Ok(())
        } else {
            Err(ReduError::invalid(format!(
                "layer shape does not match d={dim}, k={classes}"
            )))
        }
    }
}

/// A registered class and its training sample count `m_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub count: usize,
}

/// A constructed network held entirely in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduNetModel {
    pub dim: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub classes: Vec<ClassEntry>,
    pub layers: Vec<Layer>,
    /// `Σ_L^j` for every class after the last layer.
    pub final_covariances: Vec<Array2<f64>>,
    pub input: InputTransform,
}

impl ReduNetModel {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn registry(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }

    pub fn coding_params(&self) -> Result<CodingParams> {
        CodingParams::new(self.dim, &self.class_counts(), self.epsilon)
    }

    pub fn etas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.eta).collect()
    }

    /// `ΔR(Z_L)` from the stored final covariances.
    pub fn final_rate_reduction(&self) -> Result<f64> {
        rate::rate_reduction_from_covariances(&self.final_covariances, &self.coding_params()?)
    }

    pub fn head(&self) -> ModelHead {
        ModelHead {
            dim: self.dim,
            epsilon: self.epsilon,
            lambda: self.lambda,
            classes: self.classes.clone(),
            etas: self.etas(),
            first_layer: self.layers.first().cloned(),
            final_covariances: self.final_covariances.clone(),
            input: self.input.clone(),
        }
    }

    pub fn from_parts(head: ModelHead, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != head.etas.len() {
            return Err(ReduError::invalid("layer count differs from step schedule"));
        }
        let model = ReduNetModel {
            dim: head.dim,
            epsilon: head.epsilon,
            lambda: head.lambda,
            classes: head.classes,
            layers,
            final_covariances: head.final_covariances,
            input: head.input,
        };
        model.validate()?;
        Ok(model)
    }

    /// Shape and bookkeeping checks.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if self.dim == 0 || k == 0 {
            return Err(ReduError::invalid(
                "model needs a positive dimension and classes",
            ));
        }
        for l in &self.layers {
            l.check_shape(self.dim, k)?;
        }
        if self.final_covariances.len() != k
            || self
                .final_covariances
                .iter()
                .any(|c| c.dim() != (self.dim, self.dim))
        {
            return Err(ReduError::invalid(
                "final covariances do not match the registry",
            ));
        }
        Ok(())
    }
}

/// Everything about a model except layers `1..L`.
///
/// Streaming construction produces this instead of a full [`ReduNetModel`];
/// it is also all an incremental merge needs from the previous model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHead {
    pub dim: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub classes: Vec<ClassEntry>,
    pub etas: Vec<f64>,
    pub first_layer: Option<Layer>,
    pub final_covariances: Vec<Array2<f64>>,
    pub input: InputTransform,
}

impl ModelHead {
    pub fn depth(&self) -> usize {
        self.etas.len()
    }

    pub fn registry(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }

    pub fn coding_params(&self) -> Result<CodingParams> {
        CodingParams::new(self.dim, &self.class_counts(), self.epsilon)
    }

    pub fn final_rate_reduction(&self) -> Result<f64> {
        rate::rate_reduction_from_covariances(&self.final_covariances, &self.coding_params()?)
    }
}

/// Receives layers in order as they are constructed.
pub trait LayerSink {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()>;
}

impl LayerSink for Vec<Layer> {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        debug_assert_eq!(index, self.len());
        self.push(layer.clone());
        Ok(())
    }
}

impl LayerSink for () {
    fn push_layer(&mut self, _index: usize, _layer: &Layer) -> Result<()> {
        Ok(())
    }
}

impl<S: LayerSink + ?Sized> LayerSink for &mut S {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        (**self).push_layer(index, layer)
    }
}

impl<A: LayerSink, B: LayerSink> LayerSink for (A, B) {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        self.0.push_layer(index, layer)?;
        self.1.push_layer(index, layer)
    }
}

impl<S: LayerSink> LayerSink for Option<S> {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        match self {
            Some(s) => s.push_layer(index, layer),
            None => Ok(()),
        }
    }
}
