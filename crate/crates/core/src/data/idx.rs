//! IDX files as distributed for MNIST: big-endian header, unsigned-byte payload.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::RawDataset;
use crate::error::{ReduError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(offset: u64, detail: impl Into<String>) -> ReduError {
    ReduError::Format {
        offset,
        detail: detail.into(),
    }
}

fn read_be_u32(file: &mut File, offset: u64, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    file.read_exact(&mut buf)
        .map_err(|_| format_err(offset, format!("truncated header reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Read a header of `magic` followed by `dims` big-endian sizes and return
/// the sizes along with the payload, checking the file length first.
fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let found = read_be_u32(&mut file, 0, "magic number")?;
    if found != magic {
        return Err(format_err(
            0,
            format!(
                "bad magic {found:#010x} in {}, expected {magic:#010x}",
                path.display()
            ),
        ));
    }
    let mut shape = Vec::with_capacity(dims);
    for i in 0..dims {
        shape.push(read_be_u32(&mut file, 4 + 4 * i as u64, "dimension")? as usize);
    }
    let header = 4 + 4 * dims as u64;
    let payload = shape
        .iter()
        .try_fold(1u64, |acc, &s| acc.checked_mul(s as u64))
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    if file_len < header + payload {
        return Err(format_err(
            file_len,
            format!(
                "truncated payload in {}: {} bytes present, {} expected",
                path.display(),
                file_len - header,
                payload
            ),
        ));
    }
    if file_len > header + payload {
        return Err(format_err(
            header + payload,
            format!(
                "{} trailing bytes in {}",
                file_len - header - payload,
                path.display()
            ),
        ));
    }
    let mut data = vec![0u8; payload as usize];
    file.read_exact(&mut data)?;
    Ok((shape, data))
}

/// Load an image file (`n × rows × cols`) and its label file (`n`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawDataset> {
    let (shape, pixels) = read_idx(images, IDX_IMAGES_MAGIC, 3)?;
    let (lshape, label_bytes) = read_idx(labels, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    if n == 0 {
        return Err(format_err(4, "image file holds no records"));
    }
    if lshape[0] != n {
        return Err(format_err(
            4,
            format!("{} labels for {} images", lshape[0], n),
        ));
    }
    if let Some(i) = label_bytes.iter().position(|&l| l > 9) {
        return Err(format_err(
            8 + i as u64,
            format!("label {} outside 0-9", label_bytes[i]),
        ));
    }
    Ok(RawDataset {
        name: "mnist".into(),
        height: rows,
        width: cols,
        channels: 1,
        pixels,
        labels: label_bytes,
    })
}

/// Write a single-channel dataset as an IDX image/label pair.
pub fn write_idx(data: &RawDataset, images: &Path, labels: &Path) -> Result<()> {
    if data.channels != 1 {
        return Err(ReduError::invalid(
            "IDX image files hold single-channel images",
        ));
    }
    let mut f = File::create(images)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for v in [data.len(), data.height, data.width] {
        f.write_all(&(v as u32).to_be_bytes())?;
    }
    f.write_all(&data.pixels)?;
    let mut f = File::create(labels)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(data.len() as u32).to_be_bytes())?;
    f.write_all(&data.labels)?;
    Ok(())
}
