//! Run configuration: a flat `key = value` text file plus command-line
//! overrides. Every invalid field yields an error naming the key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nscl_core::error::{Error, Result};
use nscl_core::harness::synthetic::{ConvSpec, GaussianSpec};
use nscl_core::harness::{Mode, RunSettings};
use nscl_core::net::{BiasMode, InputShape, LayerSpec, NetConfig};
use nscl_core::optim::{AdamParams, LrSchedule};

/// Where the task stream comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synthetic(GaussianSpec),
    SyntheticConv(ConvSpec),
    /// Per-task train/test file pairs, in task order.
    Files { format: FileFormat, pairs: Vec<(PathBuf, PathBuf)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    RawF32,
}

/// One entry of the architecture string, before input dims are known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchItem {
    Dense { out_dim: usize },
    Conv { out_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize },
    Relu,
}

/// Fully parsed and validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub a: f64,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bias: BiasMode,
    pub arch: Vec<ArchItem>,
    /// Input shape; `None` means "derive from the task source".
    pub input: Option<InputShape>,
    pub tasks: TaskSource,
    pub out_dir: PathBuf,
}

pub const DEFAULT_ARCH: &str = "dense:64,relu,dense:64,relu";

/// Splits `key = value` lines; `#` starts a comment; blank lines ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_as<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("key {key:?}: invalid value {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|item| parse_as::<T>(key, item.trim())).collect()
}

fn parse_arch(v: &str) -> Result<Vec<ArchItem>> {
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "relu" {
            out.push(ArchItem::Relu);
        } else if let Some(dim) = item.strip_prefix("dense:") {
            out.push(ArchItem::Dense { out_dim: parse_as("arch", dim)? });
        } else if let Some(rest) = item.strip_prefix("conv:") {
            // conv:<out_channels>:<kh>x<kw>:<stride>
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "key \"arch\": conv spec {item:?} must be conv:<out>:<kh>x<kw>:<stride>"
                )));
            }
            let (kh, kw) = parts[1].split_once('x').ok_or_else(|| {
                Error::Config(format!("key \"arch\": kernel {:?} must be <kh>x<kw>", parts[1]))
            })?;
            out.push(ArchItem::Conv {
                out_channels: parse_as("arch", parts[0])?,
                kernel_h: parse_as("arch", kh)?,
                kernel_w: parse_as("arch", kw)?,
                stride: parse_as("arch", parts[2])?,
            });
        } else {
            return Err(Error::Config(format!("key \"arch\": unknown layer {item:?}")));
        }
    }
    Ok(out)
}

fn parse_input(v: &str) -> Result<InputShape> {
    let parts: Vec<&str> = v.split('x').collect();
    match parts.len() {
        1 => Ok(InputShape::Flat(parse_as("input", parts[0])?)),
        3 => Ok(InputShape::Spatial {
            channels: parse_as("input", parts[0])?,
            height: parse_as("input", parts[1])?,
            width: parse_as("input", parts[2])?,
        }),
        _ => Err(Error::Config(format!(
            "key \"input\": expected <dim> or <c>x<h>x<w>, got {v:?}"
        ))),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "seed",
    "a",
    "lr",
    "lr_decay_epochs",
    "lr_decay_factor",
    "epochs",
    "batch_size",
    "bias",
    "arch",
    "input",
    "tasks",
    "out_dir",
    "format",
    "synth.tasks",
    "synth.classes",
    "synth.dim",
    "synth.train_per_class",
    "synth.test_per_class",
    "synth.mean_radius",
    "synth.std",
    "synth.coord_decay",
    "conv.tasks",
    "conv.classes",
    "conv.height",
    "conv.width",
    "conv.train_per_class",
    "conv.test_per_class",
    "conv.template_scale",
    "conv.std",
];

impl RunConfig {
    /// Builds the configuration from file pairs plus `--set` overrides
    /// (later values win). `seed` has no default on purpose.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<RunConfig> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        let mut task_files: BTreeMap<usize, (Option<&str>, Option<&str>)> = BTreeMap::new();
        for (k, v) in pairs {
            if let Some(rest) = k.strip_prefix("task.") {
                let (idx, kind) = rest.split_once('.').ok_or_else(|| {
                    Error::Config(format!("key {k:?}: expected task.<index>.train or task.<index>.test"))
                })?;
                let idx: usize = parse_as(k, idx)?;
                let slot = task_files.entry(idx).or_default();
                match kind {
                    "train" => slot.0 = Some(v),
                    "test" => slot.1 = Some(v),
                    _ => {
                        return Err(Error::Config(format!(
                            "key {k:?}: expected task.<index>.train or task.<index>.test"
                        )))
                    }
                }
                continue;
            }
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            map.insert(k, v);
        }

        let get = |k: &str| map.get(k).copied();

        let mode = match get("mode").unwrap_or("nscl") {
            "nscl" => Mode::Nscl,
            "plain-adam" => Mode::PlainAdam,
            other => {
                return Err(Error::Config(format!(
                    "key \"mode\": expected nscl or plain-adam, got {other:?}"
                )))
            }
        };
        let seed: u64 = match get("seed") {
            Some(v) => parse_as("seed", v)?,
            None => return Err(Error::Config("key \"seed\" is required (no entropy default)".into())),
        };
        let a: f64 = parse_as("a", get("a").unwrap_or("10"))?;
        if a.is_nan() || a < 1.0 {
            return Err(Error::Config(format!("key \"a\": must be >= 1, got {a}")));
        }
        let lr: f64 = parse_as("lr", get("lr").unwrap_or("4e-3"))?;
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Config(format!("key \"lr\": must be > 0, got {lr}")));
        }
        let lr_decay_epochs = parse_list("lr_decay_epochs", get("lr_decay_epochs").unwrap_or("8,15"))?;
        let lr_decay_factor: f64 =
            parse_as("lr_decay_factor", get("lr_decay_factor").unwrap_or("0.5"))?;
        let epochs: usize = parse_as("epochs", get("epochs").unwrap_or("20"))?;
        if epochs == 0 {
            return Err(Error::Config("key \"epochs\": must be >= 1".into()));
        }
        let batch_size: usize = parse_as("batch_size", get("batch_size").unwrap_or("32"))?;
        if batch_size == 0 {
            return Err(Error::Config("key \"batch_size\": must be >= 1".into()));
        }
        let bias = match get("bias").unwrap_or("augmented") {
            "augmented" => BiasMode::Augmented,
            "none" => BiasMode::None,
            other => {
                return Err(Error::Config(format!(
                    "key \"bias\": expected augmented or none, got {other:?}"
                )))
            }
        };
        let arch = parse_arch(get("arch").unwrap_or(DEFAULT_ARCH))?;
        let input = get("input").map(parse_input).transpose()?;

        let tasks = match get("tasks").unwrap_or("synthetic") {
            "synthetic" => {
                let d = GaussianSpec::default();
                TaskSource::Synthetic(GaussianSpec {
                    tasks: parse_or("synth.tasks", get("synth.tasks"), d.tasks)?,
                    classes: parse_or("synth.classes", get("synth.classes"), d.classes)?,
                    dim: parse_or("synth.dim", get("synth.dim"), d.dim)?,
                    train_per_class: parse_or(
                        "synth.train_per_class",
                        get("synth.train_per_class"),
                        d.train_per_class,
                    )?,
                    test_per_class: parse_or(
                        "synth.test_per_class",
                        get("synth.test_per_class"),
                        d.test_per_class,
                    )?,
                    mean_radius: parse_or("synth.mean_radius", get("synth.mean_radius"), d.mean_radius)?,
                    std: parse_or("synth.std", get("synth.std"), d.std)?,
                    coord_decay: parse_or("synth.coord_decay", get("synth.coord_decay"), d.coord_decay)?,
                })
            }
            "synthetic-conv" => {
                let d = ConvSpec::default();
                TaskSource::SyntheticConv(ConvSpec {
                    tasks: parse_or("conv.tasks", get("conv.tasks"), d.tasks)?,
                    classes: parse_or("conv.classes", get("conv.classes"), d.classes)?,
                    height: parse_or("conv.height", get("conv.height"), d.height)?,
                    width: parse_or("conv.width", get("conv.width"), d.width)?,
                    train_per_class: parse_or(
                        "conv.train_per_class",
                        get("conv.train_per_class"),
                        d.train_per_class,
                    )?,
                    test_per_class: parse_or(
                        "conv.test_per_class",
                        get("conv.test_per_class"),
                        d.test_per_class,
                    )?,
                    template_scale: parse_or(
                        "conv.template_scale",
                        get("conv.template_scale"),
                        d.template_scale,
                    )?,
                    std: parse_or("conv.std", get("conv.std"), d.std)?,
                })
            }
            "files" => {
                let format = match get("format").unwrap_or("csv") {
                    "csv" => FileFormat::Csv,
                    "raw-f32" => FileFormat::RawF32,
                    other => {
                        return Err(Error::Config(format!(
                            "key \"format\": expected csv or raw-f32, got {other:?}"
                        )))
                    }
                };
                if task_files.is_empty() {
                    return Err(Error::Config(
                        "tasks = files requires task.<i>.train/task.<i>.test entries".into(),
                    ));
                }
                let mut pairs = Vec::new();
                for (want, (idx, (train, test))) in task_files.iter().enumerate() {
                    if *idx != want {
                        return Err(Error::Config(format!(
                            "task indices must be contiguous from 0; missing task.{want}"
                        )));
                    }
                    let train = train.ok_or_else(|| {
                        Error::Config(format!("task.{idx}.train is missing"))
                    })?;
                    let test = test.ok_or_else(|| {
                        Error::Config(format!("task.{idx}.test is missing"))
                    })?;
                    pairs.push((PathBuf::from(train), PathBuf::from(test)));
                }
                TaskSource::Files { format, pairs }
            }
            other => {
                return Err(Error::Config(format!(
                    "key \"tasks\": expected synthetic, synthetic-conv or files, got {other:?}"
                )))
            }
        };

        let out_dir = resolve_out_dir(PathBuf::from(get("out_dir").unwrap_or("out")));

        Ok(RunConfig {
            mode,
            seed,
            a,
            lr,
            lr_decay_epochs,
            lr_decay_factor,
            epochs,
            batch_size,
            bias,
            arch,
            input,
            tasks,
            out_dir,
        })
    }

    /// Reads the config file and applies `--set key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut pairs = parse_pairs(&text)?;
        for item in overrides {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got {item:?}"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// The input shape this run will use, given the task source.
    pub fn effective_input(&self) -> InputShape {
        if let Some(shape) = self.input {
            return shape;
        }
        match &self.tasks {
            TaskSource::Synthetic(s) => InputShape::Flat(s.dim),
            TaskSource::SyntheticConv(s) => {
                InputShape::Spatial { channels: 1, height: s.height, width: s.width }
            }
            // For files the dimension comes from the data; the caller
            // substitutes it after loading.
            TaskSource::Files { .. } => InputShape::Flat(0),
        }
    }

    /// Resolves the architecture against a concrete input shape.
    pub fn net_config(&self, input: InputShape) -> Result<NetConfig> {
        let layers = build_layers(input, &self.arch, self.bias)?;
        Ok(NetConfig { input, layers, head_bias: self.bias })
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            mode: self.mode,
            a: self.a,
            lr: LrSchedule::new(self.lr, self.lr_decay_epochs.clone(), self.lr_decay_factor),
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: AdamParams::default(),
        }
    }
}

fn parse_or<T: std::str::FromStr>(key: &str, v: Option<&str>, default: T) -> Result<T> {
    match v {
        Some(v) => parse_as(key, v),
        None => Ok(default),
    }
}

/// Output root override: `NSCL_OUT_ROOT` re-roots relative output paths.
fn resolve_out_dir(dir: PathBuf) -> PathBuf {
    if dir.is_relative() {
        if let Ok(root) = std::env::var("NSCL_OUT_ROOT") {
            if !root.is_empty() {
                return PathBuf::from(root).join(dir);
            }
        }
    }
    dir
}

/// Fills in the in-dims of the architecture items by walking the shape flow.
fn build_layers(input: InputShape, arch: &[ArchItem], bias: BiasMode) -> Result<Vec<LayerSpec>> {
    #[derive(Clone, Copy)]
    enum S {
        Flat(usize),
        Spatial(usize, usize, usize),
    }
    let mut cur = match input {
        InputShape::Flat(d) => S::Flat(d),
        InputShape::Spatial { channels, height, width } => S::Spatial(channels, height, width),
    };
    let mut out = Vec::with_capacity(arch.len());
    for (i, item) in arch.iter().enumerate() {
        match *item {
            ArchItem::Dense { out_dim } => {
                let in_dim = match cur {
                    S::Flat(d) => d,
                    S::Spatial(c, h, w) => c * h * w,
                };
                out.push(LayerSpec::Dense { in_dim, out_dim, bias });
                cur = S::Flat(out_dim);
            }
            ArchItem::Conv { out_channels, kernel_h, kernel_w, stride } => {
                let (c, h, w) = match cur {
                    S::Spatial(c, h, w) => (c, h, w),
                    S::Flat(_) => {
                        return Err(Error::Config(format!(
                            "key \"arch\": layer {i} is conv but receives flat features"
                        )))
                    }
                };
                if stride == 0 {
                    return Err(Error::Config("key \"arch\": conv stride must be >= 1".into()));
                }
                if h < kernel_h || w < kernel_w {
                    return Err(Error::Config(format!(
                        "key \"arch\": conv layer {i} kernel {kernel_h}x{kernel_w} larger than input {h}x{w}"
                    )));
                }
                out.push(LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    bias,
                });
                cur = S::Spatial(out_channels, (h - kernel_h) / stride + 1, (w - kernel_w) / stride + 1);
            }
            ArchItem::Relu => out.push(LayerSpec::Relu),
        }
    }
    Ok(out)
}
