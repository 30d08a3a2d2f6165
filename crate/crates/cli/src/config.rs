//! Serializable descriptions of graphs, data sources and sweeps.

use std::path::{Path, PathBuf};

use mnlab::arch::{
    build_depthwise_block, build_micro_cnn_with_input, build_resnet, build_resnet18, AggregationMode, ArchGraph,
};
use mnlab::data::{load_cifar_binary, synth_dataset, CifarVariant, Dataset, SynthPattern, SynthSpec};
use mnlab::diagnostics::CkaOptions;
use mnlab::trainer::TrainConfig;
use mnlab::transform::{NormPolicy, TransformConfig};
use serde::{Deserialize, Serialize};

/// A baseline graph, either built from a named family or read from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case")]
pub enum GraphSpec {
    Resnet18 {
        classes: usize,
        #[serde(default = "three")]
        input_channels: usize,
    },
    /// ResNet with two basic blocks per stage and the given stage widths.
    Resnet {
        widths: Vec<usize>,
        classes: usize,
        #[serde(default = "three")]
        input_channels: usize,
    },
    MicroCnn {
        widths: Vec<usize>,
        classes: usize,
        #[serde(default = "three")]
        input_channels: usize,
    },
    DepthwiseBlock {
        channels: usize,
        classes: usize,
    },
    File {
        path: PathBuf,
    },
}

fn three() -> usize {
    3
}

fn cifar10() -> CifarVariant {
    CifarVariant::Cifar10
}

impl GraphSpec {
    pub fn build(&self) -> anyhow::Result<ArchGraph> {
        let g = match self {
            GraphSpec::Resnet18 {
                classes,
                input_channels,
            } => build_resnet18(*classes, *input_channels),
            GraphSpec::Resnet {
                widths,
                classes,
                input_channels,
            } => build_resnet(widths, *classes, *input_channels),
            GraphSpec::MicroCnn {
                widths,
                classes,
                input_channels,
            } => build_micro_cnn_with_input(widths, *classes, *input_channels),
            GraphSpec::DepthwiseBlock { channels, classes } => build_depthwise_block(*channels, *classes),
            GraphSpec::File { path } => ArchGraph::load(path)?,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Reads a graph file holding either a full graph or a [`GraphSpec`].
pub fn load_graph(path: &Path) -> anyhow::Result<ArchGraph> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(g) = ArchGraph::from_json(&text) {
        return Ok(g);
    }
    let spec: GraphSpec = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: neither a graph nor a graph builder spec ({e})", path.display()))?;
    spec.build()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// CIFAR-format binary files.
    Cifar {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "cifar10")]
        variant: CifarVariant,
    },
    /// Generated class-separable images; the test split uses `seed + 1`.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        height: usize,
        width: usize,
        #[serde(default = "three")]
        channels: usize,
        #[serde(default)]
        pattern: SynthPattern,
        #[serde(default)]
        noise: f32,
        #[serde(default)]
        seed: u64,
    },
}

/// Full training pool and evaluation split, before subsampling.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl LoadedData {
    /// The test split, or the training pool when no test split was given.
    pub fn evaluation(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

impl DataSource {
    pub fn load(&self) -> anyhow::Result<LoadedData> {
        match self {
            DataSource::Cifar { train, test, variant } => Ok(LoadedData {
                train: load_cifar_binary(train, *variant)?,
                test: test.as_ref().map(|t| load_cifar_binary(t, *variant)).transpose()?,
            }),
            DataSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                height,
                width,
                channels,
                pattern,
                noise,
                seed,
            } => {
                let spec = |per| SynthSpec {
                    classes: *classes,
                    samples_per_class: per,
                    height: *height,
                    width: *width,
                    channels: *channels,
                    pattern: *pattern,
                    noise: *noise,
                };
                let mut test = synth_dataset(&spec(*test_per_class), seed.wrapping_add(1))?;
                test.provenance.split = "test".into();
                Ok(LoadedData {
                    train: synth_dataset(&spec(*train_per_class), *seed)?,
                    test: Some(test),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformOptions {
    #[serde(default)]
    pub norm_policy: NormPolicy,
    #[serde(default)]
    pub aggregation: AggregationMode,
}

impl TransformOptions {
    pub fn for_r(&self, r: usize) -> TransformConfig {
        let mut cfg = TransformConfig::new(r);
        cfg.norm_policy = self.norm_policy;
        cfg.aggregation = self.aggregation;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub graph: GraphSpec,
    #[serde(default = "default_r_grid")]
    pub r_grid: Vec<usize>,
    #[serde(default = "default_ipc_grid")]
    pub ipc_grid: Vec<usize>,
    /// Seeds per cell; cell seeds are `0..seeds`.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub transform: TransformOptions,
    #[serde(default)]
    pub diagnostics: CkaOptions,
    pub output_dir: PathBuf,
    /// Cells run concurrently.
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Batch size used for evaluation and diagnostics passes.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Batch size of the analytic cost table.
    #[serde(default = "default_cost_batch")]
    pub cost_batch: u64,
    /// Record test accuracy after every epoch in `history.csv`.
    #[serde(default)]
    pub track_val: bool,
}

fn default_r_grid() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32]
}
fn default_ipc_grid() -> Vec<usize> {
    vec![50, 10]
}
fn default_seeds() -> u64 {
    3
}
fn one() -> usize {
    1
}
fn default_eval_batch() -> usize {
    256
}
fn default_cost_batch() -> u64 {
    128
}

impl SweepConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(!self.r_grid.is_empty(), "r_grid is empty");
        anyhow::ensure!(!self.ipc_grid.is_empty(), "ipc_grid is empty");
        anyhow::ensure!(self.seeds >= 1, "seeds must be at least 1");
        anyhow::ensure!(self.r_grid.iter().all(|&r| r >= 1), "r values must be at least 1");
        anyhow::ensure!(self.ipc_grid.iter().all(|&i| i >= 1), "ipc values must be at least 1");
        self.train.validate()?;
        Ok(())
    }
}
