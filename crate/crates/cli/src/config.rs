//! Run configuration: a strict TOML file, at most two levels deep.
//!
//! Unknown keys are rejected at every level. Every hyperparameter of a run
//! lives here; command-line flags only override the seed and output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tac_core::codebook::DistanceMetric;
use tac_core::losses::LossConfig;
use tac_core::model::{Activation, Architecture, OptimizerConfig, Scope, TacMode, Tap};
use tac_core::profile::{ProfileTransform, ProjectionKind};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Blobs,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub mode: TacMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Distance used by the default TAC score in summaries.
    #[serde(default = "default_metric")]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub transform: ProfileTransform,
    /// `"full"` or a tapped layer number such as `"2"`.
    #[serde(default = "default_scope")]
    pub scope: String,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub architecture: ArchitectureConfig,
    pub slices: SliceConfig,
    pub codebook: CodebookConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub addon: Option<AddonConfig>,
    pub capacity: Option<CapacityConfig>,
}

fn default_metric() -> DistanceMetric {
    DistanceMetric::L1
}

fn default_scope() -> String {
    "full".into()
}

/// Data source. Blob fields apply to `task = "blobs"`, `mnist_dir` to MNIST.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: Option<usize>,
    pub dim: Option<usize>,
    pub per_class: Option<usize>,
    pub separation: Option<f64>,
    pub noise: Option<f64>,
    pub far_classes: usize,
    pub far_scale: Option<f64>,
    /// Blobs only: size of the test split.
    pub test_count: Option<usize>,
    /// Validation samples carved from the training split. For blobs, 0
    /// means the validation column of the training log reports the test split.
    pub val_count: Option<usize>,
    /// Classes removed from training; their test samples form the OOD pool.
    pub holdout: Vec<usize>,
    pub mnist_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureName {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub name: ArchitectureName,
    /// MLP hidden widths.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Convolution channels.
    #[serde(default)]
    pub channels: Vec<usize>,
    /// MLP activation: leaky ReLU with this slope, plain ReLU when 0.
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_slope() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceConfig {
    /// 1-based tapped layers.
    pub layers: Vec<u32>,
    /// Slices per tapped layer.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    pub length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddonConfig {
    pub projection: ProjectionKind,
    pub slice_size: usize,
    /// Frozen base to attach to. When absent the base is trained first.
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub base_epochs: usize,
    pub base_optimizer: Option<OptimizerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    pub samples: usize,
    pub label_seed: Option<u64>,
}

pub fn parse_scope(s: &str) -> Result<Scope> {
    if s.eq_ignore_ascii_case("full") {
        return Ok(Scope::Full);
    }
    s.parse::<u32>()
        .map(Scope::Layer)
        .map_err(|_| CliError::config(format!("scope must be 'full' or a layer number, got '{s}'")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::Blobs => self.data.num_classes.unwrap_or(0),
            Task::Mnist => 10,
        }
    }

    /// Classes the model sees: all classes minus the holdout.
    pub fn model_classes(&self) -> usize {
        self.num_classes() - self.data.holdout.len()
    }

    pub fn taps(&self) -> Vec<Tap> {
        self.slices
            .layers
            .iter()
            .zip(&self.slices.counts)
            .map(|(&layer, &n_slices)| Tap { layer, n_slices })
            .collect()
    }

    pub fn scope(&self) -> Result<Scope> {
        parse_scope(&self.scope)
    }

    /// Architecture for samples of `input_shape`; the head exists in add-on mode only.
    pub fn architecture(&self, input_shape: &[usize]) -> Result<Architecture> {
        let head = (self.mode == TacMode::Addon).then(|| self.model_classes());
        let a = &self.architecture;
        match a.name {
            ArchitectureName::Mlp => {
                let activation = if a.leaky_slope == 0.0 {
                    Activation::Relu
                } else {
                    Activation::LeakyRelu { slope: a.leaky_slope }
                };
                Ok(Architecture::mlp(input_shape.iter().product(), &a.hidden, activation, head))
            }
            ArchitectureName::Conv => {
                let [c, h, w] = input_shape[..] else {
                    return Err(CliError::config(format!("conv architecture needs [C, H, W] inputs, got {input_shape:?}")));
                };
                Ok(Architecture::conv_stack([c, h, w], &a.channels, head))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.slices.layers.is_empty() || self.slices.layers.len() != self.slices.counts.len() {
            return bad("slices.layers and slices.counts must be non-empty and of equal length".into());
        }
        let total: usize = self.slices.counts.iter().sum();
        if total != self.codebook.length {
            return bad(format!(
                "codebook.length {} differs from the total slice count {total}",
                self.codebook.length
            ));
        }
        let depth = match self.architecture.name {
            ArchitectureName::Mlp => self.architecture.hidden.len(),
            ArchitectureName::Conv => self.architecture.channels.len(),
        };
        if depth == 0 {
            return bad("architecture has no layers".into());
        }
        if let Some(&l) = self.slices.layers.iter().find(|&&l| l == 0 || l as usize > depth) {
            return bad(format!("slices.layers names layer {l} of a {depth}-layer network"));
        }
        if self.slices.layers.iter().collect::<BTreeSet<_>>().len() != self.slices.layers.len() {
            return bad("slices.layers repeats a layer".into());
        }
        if !(self.architecture.leaky_slope >= 0.0) {
            return bad("architecture.leaky_slope must be >= 0".into());
        }
        self.scope()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        match (self.mode, &self.addon) {
            (TacMode::Addon, None) => return bad("mode = \"addon\" needs an [addon] section".into()),
            (TacMode::Scratch, Some(_)) => return bad("[addon] is only valid with mode = \"addon\"".into()),
            (TacMode::Addon, Some(a)) => {
                if a.slice_size == 0 {
                    return bad("addon.slice_size must be positive".into());
                }
                if a.base_checkpoint.is_none() && a.base_epochs == 0 {
                    return bad("addon needs base_checkpoint or base_epochs > 0".into());
                }
                if let Some(o) = &a.base_optimizer {
                    o.validate()?;
                }
            }
            _ => {}
        }
        if let Some(c) = &self.capacity {
            if c.samples == 0 {
                return bad("capacity.samples must be positive".into());
            }
        }
        self.validate_data()
    }

    fn validate_data(&self) -> Result<()> {
        let d = &self.data;
        let bad = |msg: &str| Err(CliError::config(msg));
        match self.task {
            Task::Blobs => {
                if d.mnist_dir.is_some() {
                    return bad("data.mnist_dir is only valid for task = \"mnist\"");
                }
                let (Some(k), Some(_), Some(_), Some(_), Some(_), Some(_)) =
                    (d.num_classes, d.dim, d.per_class, d.separation, d.noise, d.test_count)
                else {
                    return bad("blobs need num_classes, dim, per_class, separation, noise and test_count");
                };
                if k < 2 {
                    return bad("blobs need at least 2 classes");
                }
            }
            Task::Mnist => {
                if d.mnist_dir.is_none() {
                    return bad("task = \"mnist\" needs data.mnist_dir");
                }
                let blob_keys = [d.num_classes, d.dim, d.per_class, d.test_count];
                if blob_keys.iter().any(Option::is_some) || d.separation.is_some() || d.noise.is_some() || d.far_classes > 0 {
                    return bad("blob parameters are not valid for task = \"mnist\"");
                }
            }
        }
        let k = self.num_classes();
        if d.holdout.iter().any(|&c| c >= k) {
            return bad("data.holdout names a class outside the dataset");
        }
        if d.holdout.iter().collect::<BTreeSet<_>>().len() != d.holdout.len() {
            return bad("data.holdout repeats a class");
        }
        if self.model_classes() < 2 {
            return bad("at least 2 classes must remain after the holdout");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "blobs"
mode = "scratch"
seed = 0
epochs = 1
batch_size = 8
out_dir = "out"

[data]
num_classes = 3
dim = 4
per_class = 10
separation = 3.0
noise = 1.0
test_count = 6

[architecture]
name = "mlp"
hidden = [8]

[slices]
layers = [1]
counts = [4]

[codebook]
length = 4
seed = 0

[optimizer]
kind = "adam"
lr = 0.001
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.metric, DistanceMetric::L1);
        assert_eq!(cfg.loss, LossConfig::default());
        assert_eq!(cfg.scope().unwrap(), Scope::Full);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::from_toml(&format!("{MINIMAL}\nextra = 1")).is_err());
        let nested = MINIMAL.replace("dim = 4", "dim = 4\ncolour = 1");
        assert!(RunConfig::from_toml(&nested).is_err());
        let opt = MINIMAL.replace("lr = 0.001", "lr = 0.001\nmomentumm = 0.9");
        assert!(RunConfig::from_toml(&opt).is_err());
    }

    #[test]
    fn codebook_length_must_match_slices() {
        let text = MINIMAL.replace("length = 4", "length = 5");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn addon_section_matches_mode() {
        let text = MINIMAL.replace("mode = \"scratch\"", "mode = \"addon\"");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))));
    }
}
