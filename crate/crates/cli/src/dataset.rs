//! Dataset ingestion: CSV (last column = integer label) and a raw little-
//! endian f32 format with a fixed header. Labels are remapped per task to
//! `[0, classes)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nscl_core::error::{Error, Result};
use nscl_core::harness::TaskDataset;
use nscl_core::linalg::Matrix;
use nscl_core::net::{Batch4, FeatureBatch, InputShape};

use crate::config::{FileFormat, RunConfig, TaskSource};

pub const RAW_MAGIC: &[u8; 4] = b"NSF1";

/// Parses numeric CSV rows; the last column is the integer label.
pub fn load_csv(path: &Path) -> Result<(Matrix, Vec<i64>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut width = None;
    let mut data: Vec<f64> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut rows = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Data(format!(
                "{} line {}: need at least one feature and a label",
                path.display(),
                i + 1
            )));
        }
        let dim = fields.len() - 1;
        match width {
            None => width = Some(dim),
            Some(w) if w != dim => {
                return Err(Error::Data(format!(
                    "{} line {}: {dim} features, expected {w}",
                    path.display(),
                    i + 1
                )))
            }
            _ => {}
        }
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {}: invalid number {f:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            data.push(v);
        }
        let label: i64 = fields[dim].parse().map_err(|_| {
            Error::Data(format!(
                "{} line {}: invalid integer label {:?}",
                path.display(),
                i + 1,
                fields[dim]
            ))
        })?;
        labels.push(label);
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    Ok((Matrix::new(rows, width, data), labels))
}

/// Raw f32 layout: magic `NSF1`, then u32 n, u32 dim, u32 classes (all
/// little-endian), then n*dim f32 features row-major, then n u32 labels.
pub fn load_raw(path: &Path) -> Result<(Matrix, Vec<i64>, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {pos}",
                path.display()
            )));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != RAW_MAGIC {
        return Err(Error::Data(format!("{}: bad magic at byte 0", path.display())));
    }
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        data.push(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = u32::from_le_bytes(take(4)?.try_into().unwrap()) as i64;
        if label as usize >= classes {
            return Err(Error::Data(format!(
                "{}: label {label} out of range for {classes} classes (sample {i})",
                path.display()
            )));
        }
        labels.push(label);
    }
    if pos != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok((Matrix::new(n, dim, data), labels, classes))
}

/// Writes the raw f32 format; features are narrowed to f32.
pub fn save_raw(path: &Path, features: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for {} samples",
            labels.len(),
            features.rows()
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    buf.extend_from_slice(&(classes as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &l in labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Remaps arbitrary integer labels to `[0, classes)` by sorted value; the
/// same map covers train and test of one task.
fn remap_labels(train: &[i64], test: &[i64]) -> (Vec<usize>, Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in train.iter().chain(test) {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    // BTreeMap iteration is sorted by label value; rebuild indices in order.
    let ordered: BTreeMap<i64, usize> =
        map.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    (
        train.iter().map(|l| ordered[l]).collect(),
        test.iter().map(|l| ordered[l]).collect(),
        ordered.len(),
    )
}

fn into_feature_batch(m: Matrix, input: Option<InputShape>, what: &str) -> Result<FeatureBatch> {
    match input {
        None | Some(InputShape::Flat(_)) => {
            if let Some(InputShape::Flat(d)) = input {
                if m.cols() != d {
                    return Err(Error::Data(format!(
                        "{what}: data has {} columns, input shape wants {d}",
                        m.cols()
                    )));
                }
            }
            Ok(FeatureBatch::Flat(m))
        }
        Some(InputShape::Spatial { channels, height, width }) => {
            if m.cols() != channels * height * width {
                return Err(Error::Data(format!(
                    "{what}: data has {} columns, input shape wants {channels}x{height}x{width}",
                    m.cols()
                )));
            }
            Ok(FeatureBatch::Spatial(Batch4::from_matrix(&m, channels, height, width)))
        }
    }
}

/// Loads one task's train/test pair in the configured format.
pub fn load_task(
    task_id: usize,
    train: &Path,
    test: &Path,
    format: FileFormat,
    input: Option<InputShape>,
) -> Result<TaskDataset> {
    let dataset = match format {
        FileFormat::Csv => {
            let (train_x, train_raw) = load_csv(train)?;
            let (test_x, test_raw) = load_csv(test)?;
            let (train_y, test_y, class_count) = remap_labels(&train_raw, &test_raw);
            TaskDataset {
                task_id,
                train_x: into_feature_batch(train_x, input, "train")?,
                train_y,
                test_x: into_feature_batch(test_x, input, "test")?,
                test_y,
                class_count,
            }
        }
        FileFormat::RawF32 => {
            let (train_x, train_raw, classes) = load_raw(train)?;
            let (test_x, test_raw, test_classes) = load_raw(test)?;
            if classes != test_classes {
                return Err(Error::Data(format!(
                    "task {task_id}: train declares {classes} classes, test {test_classes}"
                )));
            }
            TaskDataset {
                task_id,
                train_x: into_feature_batch(train_x, input, "train")?,
                train_y: train_raw.iter().map(|&l| l as usize).collect(),
                test_x: into_feature_batch(test_x, input, "test")?,
                test_y: test_raw.iter().map(|&l| l as usize).collect(),
                class_count: classes,
            }
        }
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Builds the full task stream for a run configuration.
pub fn build_tasks(cfg: &RunConfig) -> Result<Vec<TaskDataset>> {
    match &cfg.tasks {
        TaskSource::Synthetic(spec) => {
            Ok(nscl_core::harness::synthetic::gaussian_tasks(spec, cfg.seed))
        }
        TaskSource::SyntheticConv(spec) => {
            Ok(nscl_core::harness::synthetic::conv_tasks(spec, cfg.seed))
        }
        TaskSource::Files { format, pairs } => pairs
            .iter()
            .enumerate()
            .map(|(i, (train, test))| load_task(i, train, test, *format, cfg.input))
            .collect(),
    }
}
