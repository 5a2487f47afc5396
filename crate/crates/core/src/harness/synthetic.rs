//! Seeded synthetic task streams and the desk-scale benchmark defaults.
//!
//! The Gaussian stream draws, per task, one cluster mean per class and
//! samples around it. Coordinates are scaled by a geometric decay so the
//! input covariance spectrum decays, the regime the null-space
//! approximation needs. Class separability is unaffected: the same
//! diagonal scaling applies to means and noise alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::Matrix;
use crate::net::{Batch4, BiasMode, FeatureBatch, InputShape, LayerSpec, NetConfig};
use crate::optim::{AdamParams, LrSchedule};

use super::{Mode, RunSettings, TaskDataset};

/// Shape of a synthetic Gaussian-cluster task stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub tasks: usize,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Length of each class mean before coordinate decay.
    pub mean_radius: f64,
    /// Within-class noise scale before coordinate decay.
    pub std: f64,
    /// Per-coordinate geometric scale `decay^j`; 1.0 disables it.
    pub coord_decay: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes: 4,
            dim: 32,
            train_per_class: 150,
            test_per_class: 50,
            mean_radius: 4.0,
            std: 1.0,
            coord_decay: 0.85,
        }
    }
}

fn coordinate_scales(dim: usize, decay: f64) -> Vec<f64> {
    (0..dim).map(|j| decay.powi(j as i32)).collect()
}

/// One unit direction times `radius`, coordinate-scaled.
fn scaled_mean(rng: &mut ChaCha8Rng, scales: &[f64], radius: f64, normal: &Normal<f64>) -> Vec<f64> {
    let g: Vec<f64> = scales.iter().map(|_| normal.sample(rng)).collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    g.iter()
        .zip(scales)
        .map(|(v, s)| radius * v / norm * s)
        .collect()
}

fn sample_around(
    rng: &mut ChaCha8Rng,
    mean: &[f64],
    scales: &[f64],
    std: f64,
    normal: &Normal<f64>,
) -> Vec<f64> {
    mean.iter()
        .zip(scales)
        .map(|(m, s)| m + std * s * normal.sample(rng))
        .collect()
}

/// Class-interleaved sample block: one sample of each class in turn.
fn sample_block(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    scales: &[f64],
    std: f64,
    per_class: usize,
    normal: &Normal<f64>,
) -> (Matrix, Vec<usize>) {
    let classes = means.len();
    let dim = scales.len();
    let mut data = Vec::with_capacity(per_class * classes * dim);
    let mut labels = Vec::with_capacity(per_class * classes);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            data.extend(sample_around(rng, mean, scales, std, normal));
            labels.push(c);
        }
    }
    (Matrix::new(per_class * classes, dim, data), labels)
}

/// Seeded stream of disjoint Gaussian-cluster tasks.
pub fn gaussian_tasks(spec: &GaussianSpec, seed: u64) -> Vec<TaskDataset> {
    let scales = coordinate_scales(spec.dim, spec.coord_decay);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.tasks)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(100 + t as u64);
            let means: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| scaled_mean(&mut rng, &scales, spec.mean_radius, &normal))
                .collect();
            let (train_x, train_y) =
                sample_block(&mut rng, &means, &scales, spec.std, spec.train_per_class, &normal);
            let (test_x, test_y) =
                sample_block(&mut rng, &means, &scales, spec.std, spec.test_per_class, &normal);
            TaskDataset {
                task_id: t,
                train_x: FeatureBatch::Flat(train_x),
                train_y,
                test_x: FeatureBatch::Flat(test_x),
                test_y,
                class_count: spec.classes,
            }
        })
        .collect()
}

/// Shape of a synthetic image task stream for the conv path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub tasks: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub template_scale: f64,
    pub std: f64,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            tasks: 2,
            classes: 4,
            height: 8,
            width: 8,
            train_per_class: 40,
            test_per_class: 15,
            template_scale: 2.0,
            std: 0.4,
        }
    }
}

/// Seeded stream of single-channel image tasks: per class a fixed smooth
/// template plus pixel noise.
pub fn conv_tasks(spec: &ConvSpec, seed: u64) -> Vec<TaskDataset> {
    let pixels = spec.height * spec.width;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.tasks)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(500 + t as u64);
            // Smooth templates: a random low-frequency bump per class.
            let templates: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| {
                    let cy = rng.random_range(1..spec.height - 1) as f64;
                    let cx = rng.random_range(1..spec.width - 1) as f64;
                    let sy = 1.0 + rng.random_range(0.0..1.5);
                    let sx = 1.0 + rng.random_range(0.0..1.5);
                    (0..pixels)
                        .map(|p| {
                            let y = (p / spec.width) as f64;
                            let x = (p % spec.width) as f64;
                            let d = ((y - cy) / sy).powi(2) + ((x - cx) / sx).powi(2);
                            spec.template_scale * (-0.5 * d).exp()
                        })
                        .collect()
                })
                .collect();
            let mut draw = |per_class: usize| {
                let mut data = Vec::with_capacity(per_class * spec.classes * pixels);
                let mut labels = Vec::with_capacity(per_class * spec.classes);
                for _ in 0..per_class {
                    for (c, tpl) in templates.iter().enumerate() {
                        data.extend(tpl.iter().map(|&v| v + spec.std * normal.sample(&mut rng)));
                        labels.push(c);
                    }
                }
                let n = per_class * spec.classes;
                (
                    FeatureBatch::Spatial(Batch4::new(n, 1, spec.height, spec.width, data)),
                    labels,
                )
            };
            let (train_x, train_y) = draw(spec.train_per_class);
            let (test_x, test_y) = draw(spec.test_per_class);
            TaskDataset {
                task_id: t,
                train_x,
                train_y,
                test_x,
                test_y,
                class_count: spec.classes,
            }
        })
        .collect()
}

/// Two-hidden-layer MLP used by the desk benchmark.
pub fn desk_net_config(input_dim: usize, hidden: usize) -> NetConfig {
    NetConfig {
        input: InputShape::Flat(input_dim),
        layers: vec![
            LayerSpec::Dense { in_dim: input_dim, out_dim: hidden, bias: BiasMode::Augmented },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: hidden, out_dim: hidden, bias: BiasMode::Augmented },
            LayerSpec::Relu,
        ],
        head_bias: BiasMode::Augmented,
    }
}

/// Small conv trunk exercising the im2col path.
pub fn desk_conv_config(height: usize, width: usize) -> NetConfig {
    let (oh, ow) = (height - 2, width - 2);
    NetConfig {
        input: InputShape::Spatial { channels: 1, height, width },
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                bias: BiasMode::Augmented,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 4 * oh * ow, out_dim: 16, bias: BiasMode::Augmented },
            LayerSpec::Relu,
        ],
        head_bias: BiasMode::Augmented,
    }
}

/// Desk-scale schedule: 20 epochs per task, rate halved at epochs 8 and 15.
pub fn desk_settings(mode: Mode, a: f64, seed: u64) -> RunSettings {
    RunSettings {
        mode,
        a,
        lr: LrSchedule::new(4e-3, vec![8, 15], 0.5),
        epochs: 20,
        batch_size: 32,
        seed,
        adam: AdamParams::default(),
    }
}

/// The pinned five-task Gaussian benchmark: tasks, architecture, settings.
pub fn desk_benchmark(mode: Mode, a: f64, seed: u64) -> (Vec<TaskDataset>, NetConfig, RunSettings) {
    let spec = GaussianSpec::default();
    let tasks = gaussian_tasks(&spec, seed);
    let cfg = desk_net_config(spec.dim, 64);
    let settings = desk_settings(mode, a, seed);
    (tasks, cfg, settings)
}
