//! The three commands: `run`, `verify`, `spectra`.

use std::path::Path;

use nscl_core::covtrack::CovarianceState;
use nscl_core::error::{Error, Result};
use nscl_core::harness::{run_sequence, verify, RunReport, TaskSpectra};
use nscl_core::net::{FeatureBatch, InputShape};
use nscl_core::nullspace::compute_all;

use crate::artifacts::{
    accuracy_matrix_csv, diagnostics_csv, metrics_csv, retention_csv, write_atomic,
};
use crate::config::{RunConfig, TaskSource};
use crate::dataset::build_tasks;

/// Executes a full run and writes all artifacts into the output directory.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    let tasks = build_tasks(config)?;
    let input = match (&config.tasks, config.input) {
        (_, Some(shape)) => shape,
        (TaskSource::Files { .. }, None) => match &tasks[0].train_x {
            FeatureBatch::Flat(m) => InputShape::Flat(m.cols()),
            FeatureBatch::Spatial(b) => {
                InputShape::Spatial { channels: b.c, height: b.h, width: b.w }
            }
        },
        _ => config.effective_input(),
    };
    let net_cfg = config.net_config(input)?;
    let settings = config.settings();
    let report = run_sequence(&tasks, &net_cfg, &settings)?;

    let out = &config.out_dir;
    write_atomic(&out.join("metrics.csv"), metrics_csv(&report).as_bytes())?;
    write_atomic(&out.join("accuracy_matrix.csv"), accuracy_matrix_csv(&report).as_bytes())?;
    write_atomic(&out.join("diagnostics.csv"), diagnostics_csv(&report).as_bytes())?;
    write_atomic(&out.join("retention.csv"), retention_csv(&report).as_bytes())?;
    for spectra in &report.spectra {
        write_task_spectra(out, spectra)?;
    }
    report.covariance.save(&out.join("covariance.ckpt"))?;

    println!(
        "run complete: {} tasks, ACC {:.4}, BWT {:+.4}{}",
        report.accuracy.task_count(),
        report.acc,
        report.bwt,
        if report.bwt_defined { "" } else { " (single task; BWT undefined, reported as 0)" },
    );
    for (task, layer) in &report.empty_null_warnings {
        println!("note: task {task} layer {layer} had an empty null space");
    }
    Ok(report)
}

/// Same schema as the null-space spectrum dump, one directory per task.
fn write_task_spectra(out: &Path, spectra: &TaskSpectra) -> Result<()> {
    let dir = out.join("spectra").join(format!("task_{}", spectra.task));
    let mut summary = String::from("layer,h,k,lambda_min,cutoff,r\n");
    for layer in &spectra.layers {
        let mut csv = String::from("index,eigenvalue,retained\n");
        for (i, (lam, ret)) in layer.eigenvalues.iter().zip(&layer.retained).enumerate() {
            csv.push_str(&format!("{i},{lam},{}\n", u8::from(*ret)));
        }
        write_atomic(&dir.join(format!("layer_{}.csv", layer.layer)), csv.as_bytes())?;
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            layer.layer, layer.h, layer.k, layer.lambda_min, layer.cutoff, layer.r_proportion
        ));
    }
    write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;
    Ok(())
}

fn check(label: &str, pass: bool, detail: &str, failures: &mut Vec<String>) {
    let verdict = if pass { "pass" } else { "FAIL" };
    println!("  [{verdict}] {label}: {detail}");
    if !pass {
        failures.push(format!("{label}: {detail}"));
    }
}

/// Runs one verification suite; verification failures exit with code 4.
pub fn run_verify(suite: &str, seed: u64) -> Result<()> {
    let mut failures = Vec::new();
    match suite {
        "projector" => {
            let r = verify::projector_battery(seed)?;
            println!("projector battery: {} cases", r.cases);
            check(
                "idempotence ||P^2-P||_F <= 1e-9",
                r.max_idempotence_residual <= 1e-9,
                &format!("{:.3e}", r.max_idempotence_residual),
                &mut failures,
            );
            check(
                "symmetry <= 1e-12",
                r.max_symmetry_residual <= 1e-12,
                &format!("{:.3e}", r.max_symmetry_residual),
                &mut failures,
            );
            check(
                "orthonormality <= 1e-10",
                r.max_orthonormality_residual <= 1e-10,
                &format!("{:.3e}", r.max_orthonormality_residual),
                &mut failures,
            );
        }
        "covariance" => {
            let r = verify::covariance_battery(seed)?;
            check(
                "merge vs one-shot <= 1e-12",
                r.merge_relative_error <= 1e-12,
                &format!("{:.3e}", r.merge_relative_error),
                &mut failures,
            );
            check(
                "accumulation example exact",
                r.accumulate_example_exact,
                "[[1,2],[3,4]] -> [[5,7],[7,10]]",
                &mut failures,
            );
            check(
                "null-space equivalence",
                r.null_space_equivalence,
                &format!("{} probes", r.probes),
                &mut failures,
            );
        }
        "lemma1" => {
            for relu in [false, true] {
                let r = verify::verify_lemma1(seed, relu, 63)?;
                let out_tol = if relu { 1e-5 } else { 1e-6 };
                println!(
                    "lemma1 ({}): {} steps, zero eigenvalues per layer {:?}",
                    if relu { "relu" } else { "linear" },
                    r.task2_steps,
                    r.zero_eig_counts
                );
                check(
                    &format!("output drift <= {out_tol:e}"),
                    r.output_drift <= out_tol,
                    &format!("{:.3e}", r.output_drift),
                    &mut failures,
                );
                check(
                    "feature drift <= 1e-6",
                    r.max_feature_drift <= 1e-6,
                    &format!("{:.3e}", r.max_feature_drift),
                    &mut failures,
                );
                check(
                    "task-1 accuracy retained",
                    r.task1_accuracy_after == r.task1_accuracy_before,
                    &format!("{:.3} -> {:.3}", r.task1_accuracy_before, r.task1_accuracy_after),
                    &mut failures,
                );
            }
        }
        "plasticity" => {
            let r = verify::plasticity_battery(seed, 10.0)?;
            println!("plasticity battery: {} steps", r.total_steps);
            check(
                "min <dw,g> >= -1e-12",
                r.min_dot >= -1e-12,
                &format!("{:+.3e}", r.min_dot),
                &mut failures,
            );
            check(
                "no negative-dot steps",
                r.negative_steps == 0,
                &format!("{}", r.negative_steps),
                &mut failures,
            );
            for (i, (initial, final_loss)) in r.task_losses.iter().enumerate() {
                check(
                    &format!("task {i} final loss <= 50% of initial"),
                    *final_loss <= 0.5 * *initial,
                    &format!("{initial:.4} -> {final_loss:.4}"),
                    &mut failures,
                );
            }
        }
        "sweep" => {
            let r = verify::stability_plasticity_sweep(seed, &[1.0, 10.0, 50.0])?;
            for p in &r.points {
                println!(
                    "  a={:>4}: ACC {:.4} BWT {:+.4} task0 loss drift {:+.3e}",
                    p.a, p.acc, p.bwt, p.task0_rel_loss_increase
                );
            }
            check("BWT non-increasing in a", r.bwt_non_increasing(), "", &mut failures);
            check(
                "task-0 loss drift non-decreasing in a",
                r.retention_non_decreasing(),
                "",
                &mut failures,
            );
        }
        other => {
            return Err(Error::Config(format!(
                "unknown verify suite {other:?} (expected lemma1, projector, covariance, plasticity or sweep)"
            )))
        }
    }
    if failures.is_empty() {
        println!("verify {suite}: all checks passed");
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "suite {suite}: {} check(s) failed: {}",
            failures.len(),
            failures.join("; ")
        )))
    }
}

/// Recomputes and dumps the per-layer spectra of a covariance checkpoint.
pub fn run_spectra(checkpoint: &Path, a: f64, out_dir: &Path) -> Result<()> {
    let cov = CovarianceState::load(checkpoint)?;
    let basis = compute_all(&cov, a)?;
    nscl_core::nullspace::write_spectra(&basis, out_dir)?;
    println!("layer,h,k,lambda_min,cutoff,r");
    for (l, layer) in basis.layers.iter().enumerate() {
        println!(
            "{l},{},{},{},{},{}",
            layer.dim(),
            layer.k(),
            layer.lambda_min,
            layer.cutoff,
            layer.r_proportion
        );
    }
    Ok(())
}
