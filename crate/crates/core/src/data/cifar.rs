//! CIFAR-10 binary batches: fixed 3073-byte records, label byte first, then
//! 1024 red, 1024 green and 1024 blue bytes.

use std::path::Path;

use super::RawDataset;
use crate::error::{ReduError, Result};

pub const CIFAR_RECORD_LEN: usize = 1 + 32 * 32 * 3;

/// Load and concatenate batch files in the given order.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<RawDataset> {
    if paths.is_empty() {
        return Err(ReduError::invalid("no CIFAR batch files given"));
    }
    let mut total = 0u64;
    for p in paths {
        let len = std::fs::metadata(p.as_ref())?.len();
        if len == 0 || len % CIFAR_RECORD_LEN as u64 != 0 {
            return Err(ReduError::Format {
                offset: len - len % CIFAR_RECORD_LEN as u64,
                detail: format!(
                    "{} has {len} bytes, not a positive multiple of {CIFAR_RECORD_LEN}",
                    p.as_ref().display()
                ),
            });
        }
        total += len;
    }
    let n = (total / CIFAR_RECORD_LEN as u64) as usize;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for p in paths {
        let bytes = std::fs::read(p.as_ref())?;
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            if rec[0] > 9 {
                return Err(ReduError::Format {
                    offset: (r * CIFAR_RECORD_LEN) as u64,
                    detail: format!("label {} outside 0-9 in {}", rec[0], p.as_ref().display()),
                });
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok(RawDataset {
        name: "cifar10".into(),
        height: 32,
        width: 32,
        channels: 3,
        pixels,
        labels,
    })
}
