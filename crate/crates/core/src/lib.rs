//! Rate-reduction networks built layer by layer in closed form, with exact
//! class-incremental merging.
//!
//! ```no_run
//! use redunet::{build_redunet, fit_subspaces, evaluate, BuildConfig};
//! use redunet::data::synth_subspace_mixture;
//!
//! let (x, labels) = synth_subspace_mixture(20, 4, 3, &[50; 4], 0.05, 1).unwrap();
//! let (model, _) = build_redunet(&x, &labels, &BuildConfig { depth: 10, ..Default::default() }).unwrap();
//! let subspaces = fit_subspaces(&model, 3).unwrap();
//! let acc = evaluate(&model, &subspaces, &x, &labels).unwrap();
//! ```

extern crate blas_src;

pub mod build;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod linalg;
pub mod merge;
pub mod model;
pub mod rate;
pub mod sample;
pub mod subspace;

pub use build::{build_redunet, build_streaming, layer_forward_train, BuildConfig, BuildTrace};
pub use error::{ReduError, Result};
pub use forward::{
    estimate_membership, forward_batch, forward_sample, forward_trace, ForwardSink,
    MembershipEstimate,
};
pub use merge::{
    chain_merge, merge_new_task, merge_streaming, recover_initial_covariances, CovarianceLedger,
    TaskBatch,
};
pub use model::{ClassEntry, Layer, LayerSink, ModelHead, ReduNetModel};
pub use rate::{
    coding_rate, compression_matrix, compression_rate, expansion_matrix, normalize_classwise,
    rate_reduction, recover_covariance, CodingParams,
};
pub use sample::{ClassId, LabelAssignment, SampleMatrix};
pub use subspace::{classify, evaluate, fit_subspaces, predict, ClassSubspaces};
