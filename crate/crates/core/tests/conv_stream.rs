//! End-to-end checks of the convolutional path: a two-task image stream
//! through the full harness, and the patch covariance against a
//! straight-line im2col oracle.

use nscl_core::covtrack::accumulate_task_covariance;
use nscl_core::harness::synthetic::{conv_tasks, desk_conv_config, desk_settings, ConvSpec};
use nscl_core::harness::{dataset_batches, run_sequence, Mode};
use nscl_core::linalg::Matrix;
use nscl_core::net::{FeatureBatch, NetworkState};

#[test]
fn conv_task_stream_trains_and_tracks_patch_covariance() {
    let spec = ConvSpec::default();
    let tasks = conv_tasks(&spec, 11);
    let cfg = desk_conv_config(spec.height, spec.width);
    let mut settings = desk_settings(Mode::Nscl, 10.0, 11);
    settings.epochs = 8;
    settings.batch_size = 16;

    let report = run_sequence(&tasks, &cfg, &settings).unwrap();
    assert_eq!(report.accuracy.task_count(), 2);
    // Conv layer covariance is patch-sized: 1*3*3 + bias column.
    assert_eq!(report.covariance.covariances()[0].rows(), 10);
    // Dense layer covariance is feature-sized: 4*6*6 + bias column.
    assert_eq!(report.covariance.covariances()[1].rows(), 145);
    // Conv layers contribute patch rows: 6*6 positions per sample.
    let n_train: u64 = tasks.iter().map(|t| t.train_x.len() as u64).sum();
    assert_eq!(report.covariance.rows_seen()[0], n_train * 36);
    assert_eq!(report.covariance.rows_seen()[1], n_train);
    // Both tasks must have learned.
    for l in &report.task_losses {
        assert!(l.final_loss < l.initial, "{l:?}");
    }
}

#[test]
fn conv_covariance_matches_patch_oracle() {
    let spec = ConvSpec { tasks: 1, train_per_class: 3, test_per_class: 1, ..Default::default() };
    let task = conv_tasks(&spec, 5).remove(0);
    let cfg = desk_conv_config(spec.height, spec.width);
    let mut net = NetworkState::new(&cfg, 5).unwrap();
    net.add_head(0, spec.classes).unwrap();

    let batches = dataset_batches(&task.train_x, &task.train_y, 4);
    let got = accumulate_task_covariance(&net, &batches, 0).unwrap();

    // Oracle: extract every 3x3 patch by hand, append the bias 1, and form
    // X^T X / n with plain loops.
    let images = match &task.train_x {
        FeatureBatch::Spatial(b) => b,
        _ => panic!("conv stream must be spatial"),
    };
    let cols = 10;
    let mut rows: Vec<[f64; 10]> = Vec::new();
    for s in 0..images.n {
        for oy in 0..6 {
            for ox in 0..6 {
                let mut row = [0.0; 10];
                let mut i = 0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        row[i] = images.get(s, 0, oy + ky, ox + kx);
                        i += 1;
                    }
                }
                row[9] = 1.0;
                rows.push(row);
            }
        }
    }
    let n = rows.len() as f64;
    let mut expected = Matrix::zeros(cols, cols);
    for row in &rows {
        for i in 0..cols {
            for j in 0..cols {
                expected.set(i, j, expected.get(i, j) + row[i] * row[j]);
            }
        }
    }
    let expected = expected.map(|v| v / n);

    assert_eq!(got.rows[0], rows.len() as u64);
    assert!(
        got.cov[0].max_abs_diff(&expected) <= 1e-10,
        "max diff {}",
        got.cov[0].max_abs_diff(&expected)
    );
}
