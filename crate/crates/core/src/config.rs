//! Run configuration: data, schedule, network layouts and post hoc settings.
//!
//! Files are TOML. `key=value` overrides address dotted paths such as
//! `train.schedule.epochs=5` and win over file values.

use serde::{Deserialize, Serialize};

use crate::datakit::{SyntheticMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelSpec, Role, TrainSchedule};
use crate::posthoc::Shrinkage;
use crate::train::{NetworkSpecs, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosthocConfig {
    pub shrinkage: Shrinkage,
    /// Stochastic passes for MC-dropout mutual information.
    pub mc_samples: usize,
}

impl Default for PosthocConfig {
    fn default() -> Self {
        Self {
            shrinkage: Shrinkage::default(),
            mc_samples: 100,
        }
    }
}

/// Which stored sample the `score` subcommand reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreTarget {
    /// `train`, `test` or `ood`.
    pub split: String,
    pub index: usize,
}

impl Default for ScoreTarget {
    fn default() -> Self {
        Self {
            split: "ood".into(),
            index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    /// Network layouts; derived from the data shape when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub models: Option<NetworkSpecs>,
    pub posthoc: PosthocConfig,
    pub score: ScoreTarget,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            train: TrainConfig {
                schedule: desk_schedule(),
                ..TrainConfig::default()
            },
            models: None,
            posthoc: PosthocConfig::default(),
            score: ScoreTarget::default(),
        }
    }
}

/// Schedule used at desk scale: fewer epochs and smaller batches than the full-scale defaults.
pub fn desk_schedule() -> TrainSchedule {
    TrainSchedule {
        lr0: 1e-3,
        decay_every: 500,
        decay_rate: 0.5,
        epochs: 20,
        batch_size: 64,
    }
}

impl Config {
    pub fn network_specs(&self) -> NetworkSpecs {
        self.models.clone().unwrap_or_else(|| {
            default_networks(&self.data.sample_shape(), self.data.n_classes(), self.train.noise_dim)
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `text` (possibly empty) and applies `key=value` overrides.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base = match text {
            Some(t) => Self::from_toml(t)?,
            None => Self::default(),
        };
        let mut tree = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        let cfg: Config = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.schedule.validate()?;
        cfg.data.validate()?;
        if cfg.posthoc.mc_samples < 2 {
            return Err(Error::Config("posthoc.mc_samples must be at least 2".into()));
        }
        Ok(cfg)
    }
}

fn apply_override(tree: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut node = tree;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config(format!("empty override key in `{assignment}`")))
}

fn parse_value(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for literals; anything else is a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Reduced-scale versions of the classifier, generator and discriminator.
///
/// Images: two strided 5x5 convolutions in the classifier and discriminator;
/// the generator is a dense stem followed by three transposed-convolution
/// blocks and a final transposed convolution. Vectors use dense stacks.
pub fn default_networks(sample_shape: &[usize], n_classes: usize, noise_dim: usize) -> NetworkSpecs {
    use LayerSpec::*;
    let lrelu = LeakyRelu { alpha: 0.2 };
    let drop = Dropout { rate: 0.3 };
    if let [h, w, c] = *sample_shape {
        let conv = |filters| Conv2d { filters, kernel: 5, stride: 2 };
        let tconv = |filters| Tconv2d { filters, kernel: 5, stride: 2 };
        let (h0, w0) = (h / 16, w / 16);
        let stem = 64;
        let cls = ModelSpec {
            role: Role::Cls,
            input_shape: sample_shape.to_vec(),
            n_classes: Some(n_classes),
            layers: vec![
                conv(16),
                lrelu.clone(),
                conv(32),
                lrelu.clone(),
                Flatten,
                Dense { units: 64 },
                lrelu.clone(),
                drop.clone(),
                Dense { units: n_classes },
                Softmax,
            ],
        };
        let dis = ModelSpec {
            role: Role::Dis,
            input_shape: sample_shape.to_vec(),
            n_classes: None,
            layers: vec![
                conv(16),
                lrelu.clone(),
                conv(32),
                lrelu.clone(),
                drop.clone(),
                Flatten,
                Dense { units: 1 },
                Sigmoid,
            ],
        };
        let gen = ModelSpec {
            role: Role::Gen,
            input_shape: vec![noise_dim],
            n_classes: None,
            layers: vec![
                Dense { units: h0 * w0 * stem },
                Reshape { shape: vec![h0, w0, stem] },
                Batchnorm,
                lrelu.clone(),
                tconv(32),
                Batchnorm,
                lrelu.clone(),
                tconv(16),
                Batchnorm,
                lrelu.clone(),
                tconv(16),
                Batchnorm,
                lrelu.clone(),
                tconv(c),
                Sigmoid,
            ],
        };
        return NetworkSpecs { cls, gen, dis };
    }
    let k = sample_shape.iter().product();
    let cls = ModelSpec {
        role: Role::Cls,
        input_shape: sample_shape.to_vec(),
        n_classes: Some(n_classes),
        layers: vec![
            Dense { units: 32 },
            lrelu.clone(),
            drop.clone(),
            Dense { units: n_classes },
            Softmax,
        ],
    };
    let dis = ModelSpec {
        role: Role::Dis,
        input_shape: sample_shape.to_vec(),
        n_classes: None,
        layers: vec![Dense { units: 32 }, lrelu.clone(), drop, Dense { units: 1 }, Sigmoid],
    };
    let gen = ModelSpec {
        role: Role::Gen,
        input_shape: vec![noise_dim],
        n_classes: None,
        layers: vec![
            Dense { units: 32 },
            Batchnorm,
            lrelu,
            Dense { units: k },
            Sigmoid,
        ],
    };
    NetworkSpecs { cls, gen, dis }
}

/// Whether the configuration describes image data.
pub fn is_image(cfg: &Config) -> bool {
    cfg.data.mode == SyntheticMode::Shapes
}
