//! Plot-ready CSV artifacts of a run. All writes go through a temp file
//! and a rename.

use std::fmt::Write as _;
use std::path::Path;

use nscl_core::error::Result;
use nscl_core::harness::{compute_acc, compute_bwt, AccuracyMatrix, RunReport};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// `metrics.csv`: running ACC and BWT after each task.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("task,acc_so_far,bwt_so_far\n");
    let mut partial = AccuracyMatrix::new();
    for row in report.accuracy.rows() {
        partial.push_row(row.clone());
        let t = partial.task_count() - 1;
        let acc = compute_acc(&partial).expect("non-empty matrix");
        let (bwt, _) = compute_bwt(&partial).expect("non-empty matrix");
        let _ = writeln!(out, "{t},{acc},{bwt}");
    }
    out
}

/// `accuracy_matrix.csv`: row `t` holds accuracies on tasks `0..=t`;
/// undefined cells stay empty.
pub fn accuracy_matrix_csv(report: &RunReport) -> String {
    let t = report.accuracy.task_count();
    let mut out = String::from("after_task");
    for i in 0..t {
        let _ = write!(out, ",task_{i}");
    }
    out.push('\n');
    for (row_idx, row) in report.accuracy.rows().iter().enumerate() {
        let _ = write!(out, "{row_idx}");
        for i in 0..t {
            match row.get(i) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// `diagnostics.csv`: one row per optimizer step.
pub fn diagnostics_csv(report: &RunReport) -> String {
    let mut out = String::from("task,step,loss,dot_dw_g,g_norm,dw_norm\n");
    for d in &report.diagnostics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            d.task, d.step, d.loss, d.dot, d.g_norm, d.dw_norm
        );
    }
    out
}

/// `retention.csv`: training loss of each seen task after each task.
pub fn retention_csv(report: &RunReport) -> String {
    let t = report.train_loss_after.len();
    let mut out = String::from("after_task");
    for i in 0..t {
        let _ = write!(out, ",task_{i}");
    }
    out.push('\n');
    for (row_idx, row) in report.train_loss_after.iter().enumerate() {
        let _ = write!(out, "{row_idx}");
        for i in 0..t {
            match row.get(i) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert!(!p.with_extension("tmp").exists());
    }
}
