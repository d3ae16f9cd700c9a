//! On-disk model container.
//!
//! Layout: a plain-text header ending in a line `end`, then the payload as
//! little-endian `f64`, then a 32-byte SHA-256 of everything before it.
//!
//! ```text
//! redunet-model 1
//! dim 20
//! depth 10
//! classes 4
//! registry 0:50 1:50 2:50 3:50
//! input identity
//! payload 16234
//! end
//! ```
//!
//! Payload order: `ε`, `λ`, `η_0..η_{L-1}`; the mean image of a kernel-lift
//! input transform, if any; per layer `α`, `α_1..α_k`, `γ_1..γ_k`, `E`,
//! `C_1..C_k` (row-major); the final covariances.
//!
//! Layers are written and read one at a time, so models larger than memory
//! can be produced and consumed with [`LayerSink`]s.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::data::{InputTransform, KERNEL_RNG};
use crate::error::{ReduError, Result};
use crate::model::{ClassEntry, Layer, LayerSink, ModelHead, ReduNetModel};
use crate::sample::ClassId;

const MAGIC: &str = "redunet-model";
const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;
const DIGEST_LEN: u64 = 32;

/// Everything that must be known before the first layer is written.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPreamble {
    pub dim: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub classes: Vec<ClassEntry>,
    pub etas: Vec<f64>,
    pub input: InputTransform,
}

impl ModelPreamble {
    pub fn of_head(head: &ModelHead) -> Self {
        ModelPreamble {
            dim: head.dim,
            epsilon: head.epsilon,
            lambda: head.lambda,
            classes: head.classes.clone(),
            etas: head.etas.clone(),
            input: head.input.clone(),
        }
    }

    fn depth(&self) -> usize {
        self.etas.len()
    }

    fn mean_len(&self) -> usize {
        match &self.input {
            InputTransform::RandomKernelLift { mean_image, .. } => mean_image.len(),
            _ => 0,
        }
    }

    fn payload_values(&self) -> u64 {
        payload_values(self.dim, self.classes.len(), self.depth(), self.mean_len())
            .expect("in-memory model sizes fit in u64")
    }

    fn header(&self) -> String {
        let registry: Vec<String> = self
            .classes
            .iter()
            .map(|c| format!("{}:{}", c.id, c.count))
            .collect();
        let input = match &self.input {
            InputTransform::Identity => "identity".to_string(),
            InputTransform::PixelScale => "pixel-scale".to_string(),
            InputTransform::RandomKernelLift {
                kernel_seed,
                downscale,
                mean_image,
            } => format!(
                "random-kernel-lift {kernel_seed} {downscale} {} {KERNEL_RNG}",
                mean_image.len()
            ),
        };
        format!(
            "{MAGIC} {VERSION}\ndim {}\ndepth {}\nclasses {}\nregistry {}\ninput {input}\npayload {}\nend\n",
            self.dim,
            self.depth(),
            self.classes.len(),
            registry.join(" "),
            self.payload_values()
        )
    }
}

/// Streams a model to disk. The file appears at its destination only after
/// [`ContainerWriter::finish`]; until then it lives under a temporary name.
pub struct ContainerWriter {
    out: BufWriter<File>,
    hasher: Sha256,
    tmp: PathBuf,
    dest: PathBuf,
    preamble: ModelPreamble,
    layers_written: usize,
    done: bool,
}

impl ContainerWriter {
    pub fn create(path: &Path, preamble: ModelPreamble) -> Result<Self> {
        let tmp = temp_path(path);
        let out = BufWriter::with_capacity(1 << 20, File::create(&tmp)?);
        let mut w = ContainerWriter {
            out,
            hasher: Sha256::new(),
            tmp,
            dest: path.to_path_buf(),
            preamble,
            layers_written: 0,
            done: false,
        };
        let header = w.preamble.header();
        w.put_bytes(header.as_bytes())?;
        let scalars: Vec<f64> = [w.preamble.epsilon, w.preamble.lambda]
            .into_iter()
            .chain(w.preamble.etas.iter().copied())
            .collect();
        w.put_f64s(&scalars)?;
        if let InputTransform::RandomKernelLift { mean_image, .. } = &w.preamble.input {
            let mean = mean_image.clone();
            w.put_f64s(&mean)?;
        }
        Ok(w)
    }

    fn put_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.hasher.update(bytes);
        self.out.write_all(bytes)?;
        Ok(())
    }

    fn put_f64s(&mut self, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.put_bytes(&buf)
    }

    fn put_matrix(&mut self, m: &Array2<f64>) -> Result<()> {
        let m = m.as_standard_layout();
        self.put_f64s(m.as_slice().expect("standard layout"))
    }

    /// Write the final covariances, then move the file into place.
    pub fn finish(mut self, final_covariances: &[Array2<f64>]) -> Result<()> {
        let p = &self.preamble;
        if self.layers_written != p.depth() {
            return Err(ReduError::invalid(format!(
                "{} of {} layers written",
                self.layers_written,
                p.depth()
            )));
        }
        if final_covariances.len() != p.classes.len()
            || final_covariances.iter().any(|c| c.dim() != (p.dim, p.dim))
        {
            return Err(ReduError::invalid(
                "final covariances do not match the registry",
            ));
        }
        for c in final_covariances {
            self.put_matrix(c)?;
        }
        let digest = std::mem::take(&mut self.hasher).finalize();
        self.out.write_all(digest.as_slice())?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        fs::rename(&self.tmp, &self.dest)?;
        self.done = true;
        Ok(())
    }
}

impl LayerSink for ContainerWriter {
    fn push_layer(&mut self, index: usize, layer: &Layer) -> Result<()> {
        let p = &self.preamble;
        if index != self.layers_written || index >= p.depth() {
            return Err(ReduError::invalid(format!("unexpected layer {index}")));
        }
        layer.check_shape(p.dim, p.classes.len())?;
        if layer.eta.to_bits() != p.etas[index].to_bits() {
            return Err(ReduError::invalid(format!(
                "layer {index} step differs from schedule"
            )));
        }
        let mut scalars = vec![layer.alpha];
        scalars.extend_from_slice(&layer.alpha_classes);
        scalars.extend_from_slice(&layer.gamma);
        self.put_f64s(&scalars)?;
        self.put_matrix(&layer.expansion)?;
        for c in &layer.compression {
            self.put_matrix(c)?;
        }
        self.layers_written += 1;
        Ok(())
    }
}

impl Drop for ContainerWriter {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn payload_values(dim: usize, k: usize, depth: usize, mean_len: usize) -> Option<u64> {
    let (d, k, l) = (dim as u64, k as u64, depth as u64);
    let dd = d.checked_mul(d)?;
    let layer = (k + 1).checked_mul(dd)?.checked_add(1 + 2 * k)?;
    l.checked_mul(layer)?
        .checked_add(k.checked_mul(dd)?)?
        .checked_add(2 + l)?
        .checked_add(mean_len as u64)
}

fn format_err(offset: u64, detail: impl Into<String>) -> ReduError {
    ReduError::Format {
        offset,
        detail: detail.into(),
    }
}

/// Reads a container front to back, verifying the checksum at the end.
pub struct ContainerReader {
    input: BufReader<File>,
    hasher: Sha256,
    offset: u64,
    preamble: ModelPreamble,
    layers_read: usize,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut input = BufReader::with_capacity(1 << 20, file);
        let mut hasher = Sha256::new();
        let mut fields = Vec::new();
        let mut offset = 0u64;
        loop {
            let mut line = Vec::new();
            let n = (&mut input)
                .take((MAX_HEADER as u64).saturating_sub(offset))
                .read_until(b'\n', &mut line)?;
            if n == 0 || line.last() != Some(&b'\n') {
                return Err(format_err(
                    offset + n as u64,
                    "header is truncated or too long",
                ));
            }
            hasher.update(&line);
            let text =
                String::from_utf8(line).map_err(|_| format_err(offset, "header is not text"))?;
            let start = offset;
            offset += n as u64;
            let text = text.trim_end_matches('\n');
            if fields.is_empty() {
                let version = text
                    .strip_prefix(MAGIC)
                    .ok_or_else(|| format_err(0, "not a model container"))?
                    .trim();
                if version != VERSION.to_string() {
                    return Err(ReduError::Version(format!(
                        "found {version}, this build reads {VERSION}"
                    )));
                }
            }
            if text == "end" {
                break;
            }
            fields.push((start, text.to_string()));
        }
        let (preamble_parts, depth, mean_len, payload) = parse_header(&fields[1..])?;
        let mut preamble = preamble_parts;
        let implied = payload_values(preamble.dim, preamble.classes.len(), depth, mean_len);
        if implied != Some(payload) {
            return Err(format_err(
                0,
                "payload size disagrees with the shapes named",
            ));
        }
        let expected_len = payload
            .checked_mul(8)
            .and_then(|p| p.checked_add(offset + DIGEST_LEN))
            .ok_or_else(|| format_err(0, "payload size overflows"))?;
        if file_len != expected_len {
            return Err(format_err(
                file_len.min(expected_len),
                format!("file has {file_len} bytes, header implies {expected_len}"),
            ));
        }
        let mut r = ContainerReader {
            input,
            hasher,
            offset,
            preamble: preamble.clone(),
            layers_read: 0,
        };
        let scalars = r.take_f64s(2 + depth)?;
        preamble.epsilon = scalars[0];
        preamble.lambda = scalars[1];
        preamble.etas = scalars[2..].to_vec();
        let mean = r.take_f64s(mean_len)?;
        if let InputTransform::RandomKernelLift { mean_image, .. } = &mut preamble.input {
            *mean_image = mean;
        }
        r.preamble = preamble;
        Ok(r)
    }

    pub fn preamble(&self) -> &ModelPreamble {
        &self.preamble
    }

    fn take_bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.input
            .read_exact(&mut buf)
            .map_err(|_| format_err(self.offset, "payload is truncated"))?;
        self.hasher.update(&buf);
        self.offset += n as u64;
        Ok(buf)
    }

    fn take_f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take_bytes(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn take_matrix(&mut self, d: usize) -> Result<Array2<f64>> {
        let v = self.take_f64s(d * d)?;
        Ok(Array2::from_shape_vec((d, d), v).expect("square"))
    }

    /// The next layer, or `None` once all have been read.
    pub fn next_layer(&mut self) -> Result<Option<Layer>> {
        let (d, k) = (self.preamble.dim, self.preamble.classes.len());
        if self.layers_read == self.preamble.etas.len() {
            return Ok(None);
        }
        let scalars = self.take_f64s(1 + 2 * k)?;
        let expansion = self.take_matrix(d)?;
        let mut compression = Vec::with_capacity(k);
        for _ in 0..k {
            compression.push(self.take_matrix(d)?);
        }
        let layer = Layer {
            eta: self.preamble.etas[self.layers_read],
            expansion,
            compression,
            alpha: scalars[0],
            alpha_classes: scalars[1..1 + k].to_vec(),
            gamma: scalars[1 + k..].to_vec(),
        };
        self.layers_read += 1;
        Ok(Some(layer))
    }

    /// Read the remaining layers into `sink`, then the tail. The checksum is
    /// verified only at the end, after the sink has seen every layer.
    pub fn stream_into(mut self, sink: &mut dyn LayerSink) -> Result<ModelHead> {
        let mut first_layer = None;
        while let Some(layer) = self.next_layer()? {
            let index = self.layers_read - 1;
            sink.push_layer(index, &layer)?;
            if index == 0 {
                first_layer = Some(layer);
            }
        }
        let mut head = self.finish()?;
        head.first_layer = first_layer;
        Ok(head)
    }

    /// Skip unread layers, read the final covariances and verify the checksum.
    /// The returned head's `first_layer` is `None`.
    pub fn finish(mut self) -> Result<ModelHead> {
        while self.next_layer()?.is_some() {}
        let (d, k) = (self.preamble.dim, self.preamble.classes.len());
        let mut final_covariances = Vec::with_capacity(k);
        for _ in 0..k {
            final_covariances.push(self.take_matrix(d)?);
        }
        let computed = hex::encode(std::mem::take(&mut self.hasher).finalize().as_slice());
        let mut stored = [0u8; DIGEST_LEN as usize];
        self.input
            .read_exact(&mut stored)
            .map_err(|_| format_err(self.offset, "checksum trailer is truncated"))?;
        let expected = hex::encode(stored);
        if expected != computed {
            return Err(ReduError::Checksum { expected, computed });
        }
        let p = self.preamble;
        Ok(ModelHead {
            dim: p.dim,
            epsilon: p.epsilon,
            lambda: p.lambda,
            classes: p.classes,
            etas: p.etas,
            first_layer: None,
            final_covariances,
            input: p.input,
        })
    }
}

fn parse_header(fields: &[(u64, String)]) -> Result<(ModelPreamble, usize, usize, u64)> {
    let get = |key: &str| -> Result<(u64, Vec<&str>)> {
        fields
            .iter()
            .find_map(|(off, line)| {
                let mut parts = line.split(' ');
                (parts.next() == Some(key)).then(|| (*off, parts.collect()))
            })
            .ok_or_else(|| format_err(0, format!("header has no `{key}` line")))
    };
    let number = |key: &str| -> Result<u64> {
        let (off, v) = get(key)?;
        v.first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(off, format!("bad `{key}` value")))
    };
    let dim = number("dim")? as usize;
    let depth = number("depth")? as usize;
    let k = number("classes")? as usize;
    let payload = number("payload")?;
    let (reg_off, reg) = get("registry")?;
    let classes = reg
        .iter()
        .map(|entry| {
            let (id, count) = entry.split_once(':')?;
            Some(ClassEntry {
                id: ClassId(id.parse().ok()?),
                count: count.parse().ok()?,
            })
        })
        .collect::<Option<Vec<_>>>()
        .filter(|c| c.len() == k)
        .ok_or_else(|| format_err(reg_off, "bad registry line"))?;
    let (in_off, input) = get("input")?;
    let (input, mean_len) = match input.as_slice() {
        ["identity"] => (InputTransform::Identity, 0),
        ["pixel-scale"] => (InputTransform::PixelScale, 0),
        ["random-kernel-lift", seed, down, len, rng] if *rng == KERNEL_RNG => {
            let parse = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| format_err(in_off, "bad input line"))
            };
            (
                InputTransform::RandomKernelLift {
                    kernel_seed: parse(seed)?,
                    downscale: parse(down)? as usize,
                    mean_image: Vec::new(),
                },
                parse(len)? as usize,
            )
        }
        _ => return Err(format_err(in_off, "unknown input transform")),
    };
    if dim == 0 || k == 0 {
        return Err(format_err(0, "dimension and class count must be positive"));
    }
    Ok((
        ModelPreamble {
            dim,
            epsilon: 0.0,
            lambda: 0.0,
            classes,
            etas: Vec::new(),
            input,
        },
        depth,
        mean_len,
        payload,
    ))
}

pub fn save_model(model: &ReduNetModel, path: &Path) -> Result<()> {
    model.validate()?;
    let mut w = ContainerWriter::create(path, ModelPreamble::of_head(&model.head()))?;
    for (l, layer) in model.layers.iter().enumerate() {
        w.push_layer(l, layer)?;
    }
    w.finish(&model.final_covariances)
}

pub fn load_model(path: &Path) -> Result<ReduNetModel> {
    let mut layers = Vec::new();
    let head = ContainerReader::open(path)?.stream_into(&mut layers)?;
    ReduNetModel::from_parts(head, layers)
}

/// Read only what a merge or classifier needs: the first layer and the
/// final covariances. The whole file is still hashed.
pub fn load_head(path: &Path) -> Result<ModelHead> {
    let mut reader = ContainerReader::open(path)?;
    let first = reader.next_layer()?;
    let mut head = reader.finish()?;
    head.first_layer = first;
    Ok(head)
}
