//! Pixel scaling, mean subtraction and the random-kernel lift for color images.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::RawDataset;
use crate::error::{ReduError, Result};
use crate::sample::{ClassId, LabelAssignment, SampleMatrix};

/// Number of lifting kernels.
pub const KERNEL_COUNT: usize = 5;
/// Generator used for kernel entries; recorded alongside the seed.
pub const KERNEL_RNG: &str = "chacha8";

/// 3×3 filters, one slab per input channel, applied with stride 1 and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    pub seed: Option<u64>,
    pub in_channels: usize,
    /// `count × in_channels × 3 × 3`, row-major.
    pub weights: Vec<f64>,
}

impl KernelBank {
    /// Five kernels with i.i.d. standard normal entries.
    pub fn from_seed(seed: u64, in_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..KERNEL_COUNT * in_channels * 9)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        KernelBank {
            seed: Some(seed),
            in_channels,
            weights,
        }
    }

    pub fn from_weights(in_channels: usize, weights: Vec<f64>) -> Result<Self> {
        if in_channels == 0 || weights.is_empty() || !weights.len().is_multiple_of(in_channels * 9) {
            return Err(ReduError::invalid(
                "kernel weights must be count × channels × 3 × 3",
            ));
        }
        Ok(KernelBank {
            seed: None,
            in_channels,
            weights,
        })
    }

    pub fn count(&self) -> usize {
        self.weights.len() / (self.in_channels * 9)
    }

    fn weight(&self, k: usize, ch: usize, dr: usize, dc: usize) -> f64 {
        self.weights[((k * self.in_channels + ch) * 3 + dr) * 3 + dc]
    }

    /// Cross-correlate a channel-planar image; output is kernel-planar,
    /// same height and width.
    pub fn lift(&self, image: &[f64], height: usize, width: usize) -> Vec<f64> {
        let hw = height * width;
        let mut out = vec![0.0; self.count() * hw];
        for k in 0..self.count() {
            for r in 0..height {
                for c in 0..width {
                    let mut acc = 0.0;
                    for ch in 0..self.in_channels {
                        for dr in 0..3 {
                            let rr = r as isize + dr as isize - 1;
                            if rr < 0 || rr >= height as isize {
                                continue;
                            }
                            for dc in 0..3 {
                                let cc = c as isize + dc as isize - 1;
                                if cc < 0 || cc >= width as isize {
                                    continue;
                                }
                                acc += self.weight(k, ch, dr, dc)
                                    * image[ch * hw + rr as usize * width + cc as usize];
                            }
                        }
                    }
                    out[k * hw + r * width + c] = acc;
                }
            }
        }
        out
    }
}

/// How raw images become feature vectors; stored with a model so that
/// inference repeats the training-time path.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum InputTransform {
    /// Features are supplied directly.
    #[default]
    Identity,
    /// Flatten and divide by 255.
    PixelScale,
    /// Divide by 255, block-average by `downscale`, subtract the training
    /// mean image, then lift with [`KernelBank::from_seed`].
    RandomKernelLift {
        kernel_seed: u64,
        downscale: usize,
        mean_image: Vec<f64>,
    },
}

impl InputTransform {
    /// Apply to a raw dataset, producing features and labels.
    pub fn prepare(&self, raw: &RawDataset) -> Result<(SampleMatrix, LabelAssignment)> {
        match self {
            InputTransform::Identity => Err(ReduError::invalid(
                "model has no image transform; supply features directly",
            )),
            InputTransform::PixelScale => preprocess_mnist(raw),
            InputTransform::RandomKernelLift {
                kernel_seed,
                downscale,
                mean_image,
            } => {
                let bank = KernelBank::from_seed(*kernel_seed, raw.channels);
                let (x, l, _) =
                    preprocess_cifar(raw, &bank, *downscale, DataRole::Test, Some(mean_image))?;
                Ok((x, l))
            }
        }
    }
}

/// Whether preprocessing may derive statistics from the data it sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataRole {
    Train,
    Test,
}

fn dataset_labels(raw: &RawDataset) -> Result<LabelAssignment> {
    let labels: Vec<ClassId> = raw.labels.iter().map(|&l| ClassId(l as u32)).collect();
    let mut registry = labels.clone();
    registry.sort();
    registry.dedup();
    LabelAssignment::with_registry(labels, registry)
}

/// Flatten 28×28 grayscale images to 784-vectors scaled to `[0, 1]`.
pub fn preprocess_mnist(raw: &RawDataset) -> Result<(SampleMatrix, LabelAssignment)> {
    if (raw.height, raw.width, raw.channels) != (28, 28, 1) {
        return Err(ReduError::invalid(format!(
            "expected 28x28x1 images, got {}x{}x{}",
            raw.height, raw.width, raw.channels
        )));
    }
    if raw.is_empty() {
        return Err(ReduError::invalid("dataset is empty"));
    }
    let d = raw.record_len();
    let data = Array2::from_shape_fn((d, raw.len()), |(i, j)| {
        raw.pixels[j * d + i] as f64 / 255.0
    });
    Ok((SampleMatrix::new(data)?, dataset_labels(raw)?))
}

/// Block-average a channel-planar image by `factor` in both directions.
pub fn downscale(
    image: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    factor: usize,
) -> Vec<f64> {
    if factor == 1 {
        return image.to_vec();
    }
    let (h, w) = (height / factor, width / factor);
    let norm = (factor * factor) as f64;
    let mut out = vec![0.0; channels * h * w];
    for ch in 0..channels {
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        s += image
                            [ch * height * width + (r * factor + dr) * width + c * factor + dc];
                    }
                }
                out[ch * h * w + r * w + c] = s / norm;
            }
        }
    }
    out
}

/// Scale to `[0, 1]`, optionally downscale, subtract the training mean image
/// and lift with `bank`. Returns the features (`count · H' · W'` per sample),
/// labels and the mean image that was subtracted.
///
/// Training data computes its own mean unless one is given; test data must
/// be given the training mean.
pub fn preprocess_cifar(
    raw: &RawDataset,
    bank: &KernelBank,
    downscale_factor: usize,
    role: DataRole,
    train_mean: Option<&[f64]>,
) -> Result<(SampleMatrix, LabelAssignment, Vec<f64>)> {
    if raw.is_empty() {
        return Err(ReduError::invalid("dataset is empty"));
    }
    if raw.channels != bank.in_channels {
        return Err(ReduError::invalid(format!(
            "images have {} channels, kernels expect {}",
            raw.channels, bank.in_channels
        )));
    }
    if downscale_factor == 0
        || !raw.height.is_multiple_of(downscale_factor)
        || !raw.width.is_multiple_of(downscale_factor)
    {
        return Err(ReduError::invalid(format!(
            "downscale factor {downscale_factor} does not divide {}x{}",
            raw.height, raw.width
        )));
    }
    let (h, w) = (raw.height / downscale_factor, raw.width / downscale_factor);
    let small_len = raw.channels * h * w;
    let images: Vec<Vec<f64>> = (0..raw.len())
        .map(|i| {
            let scaled: Vec<f64> = raw.image(i).iter().map(|&p| p as f64 / 255.0).collect();
            downscale(
                &scaled,
                raw.channels,
                raw.height,
                raw.width,
                downscale_factor,
            )
        })
        .collect();
    let mean = match (role, train_mean) {
        (_, Some(m)) => {
            if m.len() != small_len {
                return Err(ReduError::invalid(format!(
                    "mean image has {} entries, expected {small_len}",
                    m.len()
                )));
            }
            m.to_vec()
        }
        (DataRole::Train, None) => {
            let mut m = vec![0.0; small_len];
            for img in &images {
                for (a, v) in m.iter_mut().zip(img) {
                    *a += v;
                }
            }
            m.iter_mut().for_each(|a| *a /= images.len() as f64);
            m
        }
        (DataRole::Test, None) => {
            return Err(ReduError::invalid(
                "test preprocessing needs the training mean image",
            ))
        }
    };
    let d = bank.count() * h * w;
    let mut data = Array2::zeros((d, raw.len()));
    for (j, img) in images.iter().enumerate() {
        let centered: Vec<f64> = img.iter().zip(&mean).map(|(v, m)| v - m).collect();
        let lifted = bank.lift(&centered, h, w);
        for (i, v) in lifted.into_iter().enumerate() {
            data[[i, j]] = v;
        }
    }
    Ok((SampleMatrix::new(data)?, dataset_labels(raw)?, mean))
}
