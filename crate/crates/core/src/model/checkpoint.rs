//! Binary checkpoint format.
//!
//! Layout: magic `MSRG1`, u64 LE config digest, u32 LE record count, then
//! one record per tensor: u16 LE path length + UTF-8 path, u32 LE rows,
//! u32 LE cols, u8 precision tag (bit width), row-major little-endian
//! values. Loading verifies the digest against the active configuration
//! unless `force` remapping is requested.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ModelParams};
use crate::tensor::{Matrix, Scalar};

const MAGIC: &[u8; 5] = b"MSRG1";

pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&cfg.digest().to_le_bytes())?;
    let count = u32::try_from(params.len())
        .map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for entry in params.entries() {
        let path_bytes = entry.path.as_bytes();
        let len = u16::try_from(path_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("path too long: {}", entry.path)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(path_bytes)?;
        w.write_all(&(entry.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(entry.value.cols() as u32).to_le_bytes())?;
        w.write_all(&[T::PRECISION_BITS])?;
        let mut buf = Vec::with_capacity(entry.value.len() * (T::PRECISION_BITS as usize / 8));
        for &v in entry.value.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Record {
    path: String,
    values: Matrix<f64>,
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_records(path: &Path) -> Result<(u64, Vec<Record>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let magic = read_exact(&mut r, 5)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let digest = u64::from_le_bytes(read_exact(&mut r, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap());
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, 2)?.try_into().unwrap());
        let name = String::from_utf8(read_exact(&mut r, len as usize)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 parameter path".into()))?;
        let rows = u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap()) as usize;
        let tag = read_exact(&mut r, 1)?[0];
        let width = match tag {
            32 => 4,
            64 => 8,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown precision tag {other} for {name}"
                )))
            }
        };
        let raw = read_exact(&mut r, rows * cols * width)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(width) {
            let v = match tag {
                32 => f32::read_le(chunk) as f64,
                _ => f64::read_le(chunk),
            };
            data.push(v);
        }
        let values = Matrix::from_vec(rows, cols, data)
            .map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?;
        records.push(Record { path: name, values });
    }
    Ok((digest, records))
}

/// Loads a checkpoint for the given configuration.
///
/// Without `force` the stored digest must match `cfg` and every architecture
/// parameter must be present with its exact shape. With `force`, matching
/// entries are remapped by path and shape; mismatches are skipped with a
/// warning and missing entries keep their fresh initialization.
pub fn load_checkpoint<T: Scalar>(
    cfg: &ModelConfig,
    path: &Path,
    force: bool,
) -> Result<ModelParams<T>> {
    let (digest, records) = read_records(path)?;
    if digest != cfg.digest() && !force {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: checkpoint {digest:#018x}, config {:#018x} \
             (pass --force to remap by name)",
            cfg.digest()
        )));
    }

    let mut params: ModelParams<T> = build_model(cfg, 0)?;
    let mut matched = 0usize;
    let mut loaded = vec![false; params.len()];
    for rec in &records {
        match params.id_of(&rec.path) {
            Some(id) => {
                let target = params.entry_mut(id);
                if target.value.dims() != rec.values.dims() {
                    if force {
                        log::warn!(
                            "skipping {}: checkpoint shape {:?} vs model {:?}",
                            rec.path,
                            rec.values.dims(),
                            target.value.dims()
                        );
                        continue;
                    }
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {}: checkpoint {:?}, model {:?}",
                        rec.path,
                        rec.values.dims(),
                        target.value.dims()
                    )));
                }
                target.value = rec.values.cast();
                loaded[id] = true;
                matched += 1;
            }
            None if force => log::warn!("skipping unknown parameter {}", rec.path),
            None => {
                return Err(Error::Checkpoint(format!(
                    "unknown parameter {} in checkpoint",
                    rec.path
                )))
            }
        }
    }
    if !force {
        if let Some(missing) = loaded.iter().position(|&l| !l) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameter {}",
                params.entries()[missing].path
            )));
        }
    }
    if matched == 0 {
        return Err(Error::Checkpoint(
            "no checkpoint parameter matched the model".into(),
        ));
    }
    Ok(params)
}
