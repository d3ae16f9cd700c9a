//! Class-incremental task splits and per-class subsampling.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ReduError, Result};
use crate::merge::TaskBatch;
use crate::sample::{ClassId, LabelAssignment, SampleMatrix};

/// Tasks in session order, each holding a disjoint group of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub tasks: Vec<TaskBatch>,
    pub classes_per_task: usize,
}

/// Group `class_order` into consecutive runs of `classes_per_task` and
/// gather each run's samples, keeping their original relative order.
///
/// `class_order` may name a subset of the classes present; unnamed classes
/// are dropped.
pub fn split_tasks(
    data: &SampleMatrix,
    labels: &LabelAssignment,
    classes_per_task: usize,
    class_order: &[ClassId],
) -> Result<TaskSplit> {
    labels.check_samples(data)?;
    if classes_per_task == 0 || class_order.is_empty() || !class_order.len().is_multiple_of(classes_per_task)
    {
        return Err(ReduError::invalid(format!(
            "{} classes cannot be grouped {classes_per_task} per task",
            class_order.len()
        )));
    }
    let mut seen = HashSet::new();
    for &c in class_order {
        if !seen.insert(c) {
            return Err(ReduError::invalid(format!("class {c} listed twice")));
        }
        if labels.position_of(c).is_none() {
            return Err(ReduError::invalid(format!("class {c} has no samples")));
        }
    }
    let mut tasks = Vec::with_capacity(class_order.len() / classes_per_task);
    for group in class_order.chunks(classes_per_task) {
        let cols: Vec<usize> = (0..labels.len())
            .filter(|&i| group.contains(&labels.labels()[i]))
            .collect();
        let features = data.select(&cols)?;
        let task_labels = LabelAssignment::with_registry(
            cols.iter().map(|&i| labels.labels()[i]).collect(),
            group.to_vec(),
        )?;
        tasks.push(TaskBatch::new(features, task_labels)?);
    }
    Ok(TaskSplit {
        tasks,
        classes_per_task,
    })
}

/// Keep at most `cap` samples of each class, drawn with a seeded generator.
/// Returned column indices are ascending, so relative order is preserved.
pub fn subsample_per_class(labels: &[ClassId], cap: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<ClassId> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let mut keep = Vec::new();
    for c in classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() <= cap {
            keep.extend(members);
        } else {
            let mut picked: Vec<usize> = sample(&mut rng, members.len(), cap).into_vec();
            picked.sort_unstable();
            keep.extend(picked.into_iter().map(|p| members[p]));
        }
    }
    keep.sort_unstable();
    keep
}

/// Split indices into the first `train_per_class` of each class and the rest.
pub fn holdout_per_class(labels: &[ClassId], train_per_class: usize) -> (Vec<usize>, Vec<usize>) {
    let mut taken = std::collections::HashMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, l) in labels.iter().enumerate() {
        let n = taken.entry(*l).or_insert(0usize);
        if *n < train_per_class {
            train.push(i);
        } else {
            test.push(i);
        }
        *n += 1;
    }
    (train, test)
}
