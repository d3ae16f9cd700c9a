//! Class-incremental runs: build on the first task, merge each later task,
//! and score every class seen so far after each session.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::build::{build_redunet, build_streaming, BuildConfig};
use crate::container::{write_atomic, ContainerWriter, ModelPreamble};
use crate::data::{
    holdout_per_class, load_cifar_binary, load_idx, preprocess_cifar, preprocess_mnist,
    split_tasks, subsample_per_class, synth_subspace_mixture, DataRole, InputTransform, KernelBank,
    RawDataset, TaskSplit,
};
use crate::error::{ReduError, Result};
use crate::forward::{estimate_membership, forward_batch, ForwardSink};
use crate::linalg::{self, max_abs_diff};
use crate::merge::{merge_streaming, TaskBatch};
use crate::model::{ClassEntry, Layer, LayerSink, ModelHead};
use crate::sample::{ClassId, LabelAssignment, SampleMatrix};
use crate::subspace::{accuracy, predict, ClassSubspaces};

pub const MODEL_FILE: &str = "model.rdn";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = ReduError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(DatasetKind::Cifar10),
            "synthetic" | "synth" => Ok(DatasetKind::Synthetic),
            other => Err(ReduError::invalid(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Generator settings for the synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub subspace_rank: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dim: 20,
            classes: 4,
            subspace_rank: 3,
            train_per_class: 50,
            test_per_class: 50,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory with the dataset files; falls back to `REDUNET_MNIST_DIR` /
    /// `REDUNET_CIFAR_DIR`, then `data/mnist` / `data/cifar10`.
    pub data_dir: Option<PathBuf>,
    pub classes_per_task: usize,
    /// Classes in session order; empty means every class, ascending.
    pub class_order: Vec<u32>,
    pub build: BuildConfig,
    /// Principal components per class for the classifier.
    pub rank: usize,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Seed of the per-class subsampling.
    pub seed: u64,
    pub kernel_seed: u64,
    /// Block-averaging factor applied to color images before the lift.
    pub downscale: usize,
    pub synthetic: SyntheticSpec,
    pub output_dir: Option<PathBuf>,
    /// Write `wall_ms` as 0 so that repeated runs give identical files.
    pub omit_timing: bool,
    pub save_model: bool,
    /// Also build jointly on all seen classes each session and compare.
    pub compare_joint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            classes_per_task: 2,
            class_order: Vec::new(),
            build: BuildConfig::default(),
            rank: 28,
            train_per_class: None,
            test_per_class: None,
            seed: 0,
            kernel_seed: 0,
            downscale: 1,
            synthetic: SyntheticSpec::default(),
            output_dir: None,
            omit_timing: false,
            save_model: true,
            compare_joint: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.build.validate()?;
        if self.rank == 0 || self.classes_per_task == 0 || self.downscale == 0 {
            return Err(ReduError::invalid(
                "rank, classes per task and downscale must be positive",
            ));
        }
        if self.train_per_class == Some(0) || self.test_per_class == Some(0) {
            return Err(ReduError::invalid("per-class caps must be positive"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        if let Some(d) = &self.data_dir {
            return d.clone();
        }
        let (var, fallback) = match self.dataset {
            DatasetKind::Mnist => ("REDUNET_MNIST_DIR", "data/mnist"),
            DatasetKind::Cifar10 => ("REDUNET_CIFAR_DIR", "data/cifar10"),
            DatasetKind::Synthetic => ("", ""),
        };
        std::env::var_os(var)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(fallback))
    }
}

/// Features ready for construction and scoring.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: (SampleMatrix, LabelAssignment),
    pub test: (SampleMatrix, LabelAssignment),
    pub input: InputTransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Dataset files present for `cfg`? Always true for synthetic data.
pub fn data_available(cfg: &ExperimentConfig) -> bool {
    let dir = cfg.data_dir();
    match cfg.dataset {
        DatasetKind::Mnist => mnist_paths(&dir, Split::Train)
            .iter()
            .chain(&mnist_paths(&dir, Split::Test))
            .all(|p| p.is_file()),
        DatasetKind::Cifar10 => cifar_paths(&dir, Split::Train)
            .iter()
            .chain(&cifar_paths(&dir, Split::Test))
            .all(|p| p.is_file()),
        DatasetKind::Synthetic => true,
    }
}

fn mnist_paths(dir: &Path, split: Split) -> [PathBuf; 2] {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    [
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    ]
}

fn cifar_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Raw images of one split, subsampled per class if configured.
pub fn load_raw(cfg: &ExperimentConfig, split: Split) -> Result<RawDataset> {
    let dir = cfg.data_dir();
    let raw = match cfg.dataset {
        DatasetKind::Mnist => {
            let [images, labels] = mnist_paths(&dir, split);
            load_idx(&images, &labels)?
        }
        DatasetKind::Cifar10 => load_cifar_binary(&cifar_paths(&dir, split))?,
        DatasetKind::Synthetic => {
            return Err(ReduError::invalid("synthetic data has no raw images"))
        }
    };
    let (cap, seed) = match split {
        Split::Train => (cfg.train_per_class, cfg.seed),
        Split::Test => (cfg.test_per_class, cfg.seed.wrapping_add(1)),
    };
    Ok(match cap {
        Some(cap) => {
            let ids: Vec<ClassId> = raw.labels.iter().map(|&l| ClassId(l as u32)).collect();
            raw.subset(&subsample_per_class(&ids, cap, seed))
        }
        None => raw,
    })
}

fn synthetic(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let s = &cfg.synthetic;
    let per_class = s.train_per_class + s.test_per_class;
    let (x, labels) = synth_subspace_mixture(
        s.dim,
        s.classes,
        s.subspace_rank,
        &vec![per_class; s.classes],
        s.noise,
        s.seed,
    )?;
    let (train, test) = holdout_per_class(labels.labels(), s.train_per_class);
    let pick = |cols: &[usize]| -> Result<(SampleMatrix, LabelAssignment)> {
        Ok((
            x.select(cols)?,
            LabelAssignment::new(cols.iter().map(|&i| labels.labels()[i]).collect())?,
        ))
    };
    Ok(PreparedData {
        train: pick(&train)?,
        test: pick(&test)?,
        input: InputTransform::Identity,
    })
}

/// Load and preprocess both splits. Color images are lifted with the
/// configured kernel seed; the mean image comes from the training split.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    match cfg.dataset {
        DatasetKind::Synthetic => synthetic(cfg),
        DatasetKind::Mnist => Ok(PreparedData {
            train: preprocess_mnist(&load_raw(cfg, Split::Train)?)?,
            test: preprocess_mnist(&load_raw(cfg, Split::Test)?)?,
            input: InputTransform::PixelScale,
        }),
        DatasetKind::Cifar10 => {
            let raw = load_raw(cfg, Split::Train)?;
            let bank = KernelBank::from_seed(cfg.kernel_seed, raw.channels);
            let (x, l, mean) = preprocess_cifar(&raw, &bank, cfg.downscale, DataRole::Train, None)?;
            drop(raw);
            let input = InputTransform::RandomKernelLift {
                kernel_seed: cfg.kernel_seed,
                downscale: cfg.downscale,
                mean_image: mean,
            };
            let test = input.prepare(&load_raw(cfg, Split::Test)?)?;
            Ok(PreparedData {
                train: (x, l),
                test,
                input,
            })
        }
    }
}

/// One split prepared with a stored model's transform.
pub fn prepare_with(
    cfg: &ExperimentConfig,
    split: Split,
    input: &InputTransform,
) -> Result<(SampleMatrix, LabelAssignment)> {
    cfg.validate()?;
    match (cfg.dataset, split) {
        (DatasetKind::Synthetic, Split::Train) => Ok(synthetic(cfg)?.train),
        (DatasetKind::Synthetic, Split::Test) => Ok(synthetic(cfg)?.test),
        _ => input.prepare(&load_raw(cfg, split)?),
    }
}

/// Session order of classes for `labels`.
pub fn class_order(cfg: &ExperimentConfig, labels: &LabelAssignment) -> Vec<ClassId> {
    if cfg.class_order.is_empty() {
        let mut all = labels.registry().to_vec();
        all.sort();
        all
    } else {
        cfg.class_order.iter().copied().map(ClassId).collect()
    }
}

/// Train and test splits grouped into sessions.
pub fn split_sessions(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(TaskSplit, TaskSplit)> {
    let order = class_order(cfg, &data.train.1);
    let train = split_tasks(&data.train.0, &data.train.1, cfg.classes_per_task, &order)?;
    let test = split_tasks(&data.test.0, &data.test.1, cfg.classes_per_task, &order)?;
    Ok((train, test))
}

/// Samples restricted to `classes`, registry in the order given.
pub fn restrict(
    x: &SampleMatrix,
    labels: &LabelAssignment,
    classes: &[ClassId],
) -> Result<(SampleMatrix, LabelAssignment)> {
    let cols: Vec<usize> = (0..labels.len())
        .filter(|&i| classes.contains(&labels.labels()[i]))
        .collect();
    if cols.is_empty() {
        return Err(ReduError::invalid("no samples of the requested classes"));
    }
    let kept = LabelAssignment::with_registry(
        cols.iter().map(|&i| labels.labels()[i]).collect(),
        classes.to_vec(),
    )?;
    Ok((x.select(&cols)?, kept))
}

fn concat_batches(acc: Option<TaskBatch>, next: &TaskBatch) -> Result<TaskBatch> {
    match acc {
        None => Ok(next.clone()),
        Some(prev) => TaskBatch::new(
            SampleMatrix::hstack(&[&prev.features, &next.features])?,
            prev.labels.concat(&next.labels)?,
        ),
    }
}

/// Header of the model that building or merging `task` onto `prior` yields.
pub fn session_preamble(
    prior: Option<&ModelHead>,
    task: &TaskBatch,
    build: &BuildConfig,
    input: &InputTransform,
) -> ModelPreamble {
    let mut classes: Vec<ClassEntry> = prior.map(|h| h.classes.clone()).unwrap_or_default();
    classes.extend(
        task.labels
            .registry()
            .iter()
            .zip(task.labels.counts())
            .map(|(&id, &count)| ClassEntry { id, count }),
    );
    ModelPreamble {
        dim: task.dim(),
        epsilon: prior.map_or(build.epsilon, |h| h.epsilon),
        lambda: prior.map_or(build.lambda, |h| h.lambda),
        classes,
        etas: prior.map_or_else(|| build.etas(), |h| h.etas.clone()),
        input: input.clone(),
    }
}

/// Build (no prior model) or merge, streaming layers into `sink`.
pub fn run_session(
    prior: Option<&ModelHead>,
    task: &TaskBatch,
    build: &BuildConfig,
    input: &InputTransform,
    sink: &mut dyn LayerSink,
) -> Result<(ModelHead, Vec<f64>)> {
    let (mut head, trace) = match prior {
        None => build_streaming(&task.features, &task.labels, build, sink)?,
        Some(h) => merge_streaming(h, task, sink)?,
    };
    head.input = input.clone();
    Ok((head, trace.delta_r))
}

/// Transformed test features and the subspace predictions for them.
fn score(
    head: &ModelHead,
    transformed: SampleMatrix,
    test_labels: &LabelAssignment,
    rank: usize,
) -> Result<(f64, Vec<ClassId>)> {
    let subspaces =
        ClassSubspaces::from_covariances(&head.registry(), &head.final_covariances, rank)?;
    let predicted = predict(&transformed, &subspaces)?;
    Ok((
        accuracy(&predicted, test_labels, &subspaces.classes)?,
        predicted,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_index: usize,
    pub classes_seen: usize,
    pub accuracy: f64,
    pub delta_r_initial: f64,
    pub delta_r_final: f64,
    pub wall_ms: u64,
    pub joint_accuracy: Option<f64>,
    /// Fraction of test samples the joint model labels identically.
    pub joint_agreement: Option<f64>,
    /// Largest difference in the first layer and final covariances.
    pub joint_discrepancy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub sessions: Vec<SessionMetrics>,
}

impl MetricsTable {
    /// Accuracy after the first session minus accuracy after the last.
    pub fn decay(&self) -> f64 {
        match (self.sessions.first(), self.sessions.last()) {
            (Some(a), Some(b)) => a.accuracy - b.accuracy,
            _ => 0.0,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.accuracy).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("session_index,classes_seen,accuracy,delta_r_final,wall_ms\n");
        for s in &self.sessions {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.session_index, s.classes_seen, s.accuracy, s.delta_r_final, s.wall_ms
            );
        }
        out
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    train_samples: usize,
    test_samples: usize,
    sessions: &'a [SessionMetrics],
    decay: f64,
    model_file: Option<&'a str>,
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)
        .map_err(|e| ReduError::invalid(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn head_discrepancy(a: &ModelHead, b: &ModelHead) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.final_covariances.iter().zip(&b.final_covariances) {
        worst = worst.max(max_abs_diff(x.view(), y.view()));
    }
    if let (Some(x), Some(y)) = (&a.first_layer, &b.first_layer) {
        worst = worst.max(layer_discrepancy(x, y));
    }
    worst
}

/// Largest absolute difference over every parameter of two layers.
pub fn layer_discrepancy(a: &Layer, b: &Layer) -> f64 {
    if a.num_classes() != b.num_classes() {
        return f64::INFINITY;
    }
    let scalars = |l: &Layer| -> Vec<f64> {
        let mut v = vec![l.eta, l.alpha];
        v.extend_from_slice(&l.alpha_classes);
        v.extend_from_slice(&l.gamma);
        v
    };
    let mut worst = scalars(a)
        .iter()
        .zip(scalars(b))
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    worst = worst.max(max_abs_diff(a.expansion.view(), b.expansion.view()));
    for (x, y) in a.compression.iter().zip(&b.compression) {
        worst = worst.max(max_abs_diff(x.view(), y.view()));
    }
    worst
}

/// Run every session of the protocol. Each session's training data is
/// dropped once merged; later sessions see only the previous model head.
pub fn run_class_il(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(CONFIG_FILE), &to_json(cfg)?)?;
    }
    let data = prepare_data(cfg)?;
    let (train_samples, test_samples) = (data.train.1.len(), data.test.1.len());
    let (train_split, test_split) = split_sessions(cfg, &data)?;
    let input = data.input.clone();
    drop(data);

    let sessions = train_split.tasks.len();
    let model_path = cfg
        .output_dir
        .as_ref()
        .filter(|_| cfg.save_model)
        .map(|d| d.join(MODEL_FILE));
    let mut table = MetricsTable::default();
    let mut head: Option<ModelHead> = None;
    let mut seen_test: Option<TaskBatch> = None;
    let mut seen_train: Option<TaskBatch> = None;

    for (t, (task, test_task)) in train_split
        .tasks
        .into_iter()
        .zip(test_split.tasks)
        .enumerate()
    {
        let session = t + 1;
        let in_session = |e: ReduError| e.in_session(session);
        let started = Instant::now();
        seen_test = Some(concat_batches(seen_test, &test_task).map_err(in_session)?);
        let test = seen_test.as_ref().expect("set above");
        if cfg.compare_joint {
            seen_train = Some(concat_batches(seen_train, &task).map_err(in_session)?);
        }

        let mut fwd = ForwardSink::new(&test.features, cfg.build.lambda).map_err(in_session)?;
        let mut writer = match &model_path {
            Some(p) if session == sessions => Some(
                ContainerWriter::create(
                    p,
                    session_preamble(head.as_ref(), &task, &cfg.build, &input),
                )
                .map_err(in_session)?,
            ),
            _ => None,
        };
        let (new_head, delta_r) = run_session(
            head.as_ref(),
            &task,
            &cfg.build,
            &input,
            &mut (&mut fwd, &mut writer),
        )
        .map_err(in_session)?;
        drop(task);
        if let Some(w) = writer {
            w.finish(&new_head.final_covariances).map_err(in_session)?;
        }
        let (acc, predicted) =
            score(&new_head, fwd.finish()?, &test.labels, cfg.rank).map_err(in_session)?;
        let wall_ms = started.elapsed().as_millis() as u64;

        let mut row = SessionMetrics {
            session_index: session,
            classes_seen: new_head.classes.len(),
            accuracy: acc,
            delta_r_initial: delta_r[0],
            delta_r_final: *delta_r.last().expect("trace has a final entry"),
            wall_ms: if cfg.omit_timing { 0 } else { wall_ms },
            joint_accuracy: None,
            joint_agreement: None,
            joint_discrepancy: None,
        };
        if let Some(joint_data) = &seen_train {
            let mut joint_fwd = ForwardSink::new(&test.features, cfg.build.lambda)?;
            let (joint_head, _) = run_session(None, joint_data, &cfg.build, &input, &mut joint_fwd)
                .map_err(in_session)?;
            let (joint_acc, joint_pred) =
                score(&joint_head, joint_fwd.finish()?, &test.labels, cfg.rank)
                    .map_err(in_session)?;
            let same = predicted
                .iter()
                .zip(&joint_pred)
                .filter(|(a, b)| a == b)
                .count();
            row.joint_accuracy = Some(joint_acc);
            row.joint_agreement = Some(same as f64 / predicted.len() as f64);
            row.joint_discrepancy = Some(head_discrepancy(&new_head, &joint_head));
        }
        table.sessions.push(row);
        head = Some(new_head);
    }

    if let Some(dir) = &cfg.output_dir {
        write_atomic(&dir.join(METRICS_FILE), table.to_csv().as_bytes())?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            train_samples,
            test_samples,
            sessions: &table.sessions,
            decay: table.decay(),
            model_file: model_path.as_ref().map(|_| MODEL_FILE),
        };
        write_atomic(&dir.join(MANIFEST_FILE), &to_json(&manifest)?)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// Largest parameter difference per layer, incremental versus joint.
    pub per_layer: Vec<f64>,
    pub final_covariance_discrepancy: f64,
    pub max_discrepancy: f64,
    /// Fraction of test samples classified identically.
    pub agreement: f64,
    pub test_samples: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares incoming layers against a reference and optionally perturbs
/// the last one before passing it on.
struct CompareSink<'a, S> {
    reference: &'a [Layer],
    per_layer: Vec<f64>,
    perturb: Option<f64>,
    inner: S,
}

impl<S: LayerSink> LayerSink for CompareSink<'_, S> {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        let mut layer = layer.clone();
        if let Some(delta) = self.perturb.filter(|_| index + 1 == self.reference.len()) {
            layer.compression[0][[0, 0]] += delta;
        }
        self.per_layer.push(match self.reference.get(index) {
            Some(r) => layer_discrepancy(&layer, r),
            None => f64::INFINITY,
        });
        self.inner.push_layer(index, &layer)
    }
}

/// Build jointly on all sessions' data, chain-merge the same sessions, and
/// compare the two networks layer by layer and on the test set.
///
/// `perturb` adds that amount to one entry of the last merged layer, as a
/// check that the comparison can fail.
pub fn run_equivalence_check(
    cfg: &ExperimentConfig,
    tolerance: f64,
    perturb: Option<f64>,
) -> Result<EquivalenceReport> {
    let data = prepare_data(cfg)?;
    let (train_split, test_split) = split_sessions(cfg, &data)?;
    let input = data.input.clone();
    drop(data);
    let mut all_test: Option<TaskBatch> = None;
    for t in &test_split.tasks {
        all_test = Some(concat_batches(all_test, t)?);
    }
    let test = all_test.expect("at least one session");
    let mut all_train: Option<TaskBatch> = None;
    for t in &train_split.tasks {
        all_train = Some(concat_batches(all_train, t)?);
    }
    let joint_data = all_train.expect("at least one session");
    let (joint, _) = build_redunet(&joint_data.features, &joint_data.labels, &cfg.build)?;
    drop(joint_data);

    let sessions = train_split.tasks.len();
    let mut head: Option<ModelHead> = None;
    let mut compare = CompareSink {
        reference: &joint.layers,
        per_layer: Vec::new(),
        perturb,
        inner: ForwardSink::new(&test.features, cfg.build.lambda)?,
    };
    for (t, task) in train_split.tasks.into_iter().enumerate() {
        let last = t + 1 == sessions;
        let sink: &mut dyn LayerSink = if last { &mut compare } else { &mut () };
        let (h, _) = run_session(head.as_ref(), &task, &cfg.build, &input, sink)
            .map_err(|e| e.in_session(t + 1))?;
        head = Some(h);
    }
    let merged = head.expect("at least one session");
    let final_covariance_discrepancy = merged
        .final_covariances
        .iter()
        .zip(&joint.final_covariances)
        .fold(0.0f64, |m, (a, b)| m.max(max_abs_diff(a.view(), b.view())));
    let per_layer = compare.per_layer;
    let (_, merged_pred) = score(&merged, compare.inner.finish()?, &test.labels, cfg.rank)?;
    let (_, joint_pred) = score(
        &joint.head(),
        forward_batch(&joint, &test.features)?,
        &test.labels,
        cfg.rank,
    )?;
    let same = merged_pred
        .iter()
        .zip(&joint_pred)
        .filter(|(a, b)| a == b)
        .count();
    let agreement = same as f64 / test.labels.len() as f64;
    let max_discrepancy = per_layer
        .iter()
        .copied()
        .fold(final_covariance_discrepancy, f64::max);
    let layers_ok = per_layer.len() == joint.depth();
    Ok(EquivalenceReport {
        passed: layers_ok && max_discrepancy <= tolerance && same == merged_pred.len(),
        per_layer,
        final_covariance_discrepancy,
        max_discrepancy,
        agreement,
        test_samples: test.labels.len(),
        tolerance,
    })
}

/// Hyperparameter values to sweep; every combination is tried.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub epsilons: Vec<f64>,
    pub eta0s: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunePoint {
    pub epsilon: f64,
    pub eta0: f64,
    pub lambda: f64,
    /// Fraction of training samples whose most likely class under the
    /// final layer's estimated membership is their label.
    pub agreement: f64,
}

struct MembershipAgreement {
    fwd: ForwardSink,
    positions: Vec<usize>,
    depth: usize,
    lambda: f64,
    hits: usize,
}

impl LayerSink for MembershipAgreement {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        if index + 1 == self.depth {
            let z = self.fwd.features();
            for (i, &truth) in self.positions.iter().enumerate() {
                if estimate_membership(z.column(i), layer, self.lambda)?.argmax() == truth {
                    self.hits += 1;
                }
            }
        }
        self.fwd.push_layer(index, layer)
    }
}

/// Score each grid point by training-label agreement of the estimated
/// membership at the last layer, using all configured training data.
pub fn tune(cfg: &ExperimentConfig, grid: &TuneGrid) -> Result<Vec<TunePoint>> {
    if cfg.build.depth == 0 {
        return Err(ReduError::invalid("tuning needs at least one layer"));
    }
    let data = prepare_data(cfg)?;
    let order = class_order(cfg, &data.train.1);
    let (x, labels) = restrict(&data.train.0, &data.train.1, &order)?;
    drop(data);
    let mut out = Vec::new();
    for &epsilon in &grid.epsilons {
        for &eta0 in &grid.eta0s {
            for &lambda in &grid.lambdas {
                let build = BuildConfig {
                    epsilon,
                    eta0,
                    lambda,
                    ..cfg.build.clone()
                };
                let mut sink = MembershipAgreement {
                    fwd: ForwardSink::new(&x, lambda)?,
                    positions: labels.positions().to_vec(),
                    depth: build.depth,
                    lambda,
                    hits: 0,
                };
                build_streaming(&x, &labels, &build, &mut sink)?;
                out.push(TunePoint {
                    epsilon,
                    eta0,
                    lambda,
                    agreement: sink.hits as f64 / labels.len() as f64,
                });
            }
        }
    }
    Ok(out)
}

/// Extreme eigenvalues of a layer's operators and the `ΔR` they encode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub index: usize,
    pub eta: f64,
    pub delta_r: f64,
    pub expansion_spectrum: (f64, f64),
    pub compression_spectra: Vec<(f64, f64)>,
}

pub fn summarize_layer(index: usize, layer: &Layer) -> Result<LayerSummary> {
    let extremes = |m: &ndarray::Array2<f64>| -> Result<(f64, f64)> {
        let (vals, _) = linalg::sym_eigen_desc(m)?;
        Ok((vals[vals.len() - 1], vals[0]))
    };
    Ok(LayerSummary {
        index,
        eta: layer.eta,
        delta_r: layer.rate_reduction()?,
        expansion_spectrum: extremes(&layer.expansion)?,
        compression_spectra: layer
            .compression
            .iter()
            .map(extremes)
            .collect::<Result<_>>()?,
    })
}
