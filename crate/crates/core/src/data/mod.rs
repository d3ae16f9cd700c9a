//! Dataset ingestion, preprocessing, task splitting and synthetic generators.

mod cifar;
mod idx;
mod preprocess;
mod split;
mod synth;

pub use cifar::{load_cifar_binary, CIFAR_RECORD_LEN};
pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use preprocess::{
    downscale, preprocess_cifar, preprocess_mnist, DataRole, InputTransform, KernelBank,
    KERNEL_COUNT, KERNEL_RNG,
};
pub use split::{holdout_per_class, split_tasks, subsample_per_class, TaskSplit};
pub use synth::synth_subspace_mixture;

/// Images as channel-planar unsigned bytes plus their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `n` records of `channels × height × width` bytes, channel-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn record_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.record_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Keep only the listed records, in the listed order.
    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.record_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        RawDataset {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
