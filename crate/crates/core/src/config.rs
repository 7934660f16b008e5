//! JSON run configuration shared by every command. Unknown keys are
//! rejected; omitted keys take the defaults documented on each field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocks::{stem_width, BlockSpec, Family, InputSpec, NetworkSpec, PoolSpec, Position, StemSpec};
use crate::error::{invalid, Error, Result};
use crate::gradcheck;
use crate::tensor::Precision;
use crate::train::{ToyDatasetConfig, ToyNetworkConfig, TrainConfig};
use crate::verify::VerifyConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub verify: VerifyConfig,
    pub gradcheck: GradcheckSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Either a named preset or an explicit description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// `mixnet-100`, `mixnet-250`, `mixnet-190`, `mixnet-105`, `mixnet-121`
    /// or `mixnet-141`. Excludes `family`, `depth`, `blocks`, `k1`, `k2`,
    /// `position`, `classes` and `input_size`.
    pub preset: Option<String>,
    /// Default `cifar`.
    pub family: Option<Family>,
    /// Depth `L`; CIFAR only, `n = (L − 4) / 6` layers per block.
    pub depth: Option<usize>,
    /// Layers per block; overrides `depth`.
    pub blocks: Option<Vec<usize>>,
    /// Default 12.
    pub k1: Option<usize>,
    /// Default 12.
    pub k2: Option<usize>,
    /// Default `unfixed`.
    pub position: Option<Position>,
    /// Bottleneck multiplier `m`, default 4.
    pub multiplier: Option<usize>,
    /// Transition compression `θ`, default 1.0.
    pub compression: Option<f64>,
    /// Default 10 (CIFAR) or 1000 (ImageNet).
    pub classes: Option<usize>,
    /// Default 32 (CIFAR) or 224 (ImageNet).
    pub input_size: Option<usize>,
}

pub const DEFAULT_MULTIPLIER: usize = 4;
pub const DEFAULT_COMPRESSION: f64 = 1.0;

impl NetworkSection {
    pub fn preset(name: &str) -> Self {
        NetworkSection {
            preset: Some(name.to_string()),
            ..Default::default()
        }
    }

    pub fn to_spec(&self) -> Result<NetworkSpec> {
        let m = self.multiplier.unwrap_or(DEFAULT_MULTIPLIER);
        let theta = self.compression.unwrap_or(DEFAULT_COMPRESSION);
        if let Some(name) = &self.preset {
            let explicit = [
                ("family", self.family.is_some()),
                ("depth", self.depth.is_some()),
                ("blocks", self.blocks.is_some()),
                ("k1", self.k1.is_some()),
                ("k2", self.k2.is_some()),
                ("position", self.position.is_some()),
                ("classes", self.classes.is_some()),
                ("input_size", self.input_size.is_some()),
            ];
            if let Some((key, _)) = explicit.iter().find(|(_, set)| *set) {
                return Err(Error::InvalidConfig(format!("network.{key} cannot be combined with network.preset")));
            }
            return NetworkSpec::preset(name, m, theta).map_err(|e| Error::InvalidConfig(format!("network.preset: {e}")));
        }
        let family = self.family.unwrap_or(Family::Cifar);
        let (k1, k2) = (self.k1.unwrap_or(12), self.k2.unwrap_or(12));
        let position = self.position.unwrap_or(Position::Unfixed);
        let layers = match (&self.blocks, self.depth) {
            (Some(b), _) => b.clone(),
            (None, Some(depth)) if family == Family::Cifar => {
                if depth < 10 || (depth - 4) % 6 != 0 {
                    return Err(Error::InvalidConfig(format!("network.depth: {depth} is not 6n + 4 for a whole n ≥ 1")));
                }
                vec![(depth - 4) / 6; 3]
            }
            (None, Some(_)) => return Err(Error::InvalidConfig("network.depth applies to the cifar family; give network.blocks".into())),
            (None, None) => return Err(Error::InvalidConfig("network needs `preset`, `depth` or `blocks`".into())),
        };
        let (stem, size, classes) = match family {
            Family::Cifar => (
                StemSpec {
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    width: stem_width(k1, k2),
                    pool: None,
                },
                32,
                10,
            ),
            Family::Imagenet => (
                StemSpec {
                    kernel: 7,
                    stride: 2,
                    pad: 3,
                    width: stem_width(k1, k2),
                    pool: Some(PoolSpec { window: 3, stride: 2, pad: 1 }),
                },
                224,
                1000,
            ),
        };
        let depth = 2 * layers.iter().sum::<usize>() + 1 + layers.len().saturating_sub(1) + 1;
        let spec = NetworkSpec {
            name: format!("mixnet-{depth}"),
            family,
            input: InputSpec {
                channels: 3,
                size: self.input_size.unwrap_or(size),
            },
            stem,
            blocks: layers.iter().map(|&n| BlockSpec { layers: n, k1, k2, position }).collect(),
            multiplier: m,
            compression: theta,
            classes: self.classes.unwrap_or(classes),
        };
        spec.validate().map_err(|e| Error::InvalidConfig(format!("network: {e}")))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Operation names; empty means every operation plus the mixed block.
    pub ops: Vec<String>,
    pub trials: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            ops: Vec::new(),
            trials: 100,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl GradcheckSection {
    pub fn resolved_ops(&self) -> Result<Vec<String>> {
        if self.ops.is_empty() {
            return Ok(gradcheck::OPS.iter().map(|s| s.to_string()).collect());
        }
        for op in &self.ops {
            if !gradcheck::OPS.contains(&op.as_str()) {
                return Err(Error::InvalidConfig(format!("gradcheck.ops: unknown op `{op}`")));
            }
        }
        Ok(self.ops.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Fixed vs Unfixed at equal parameter count.
    Position,
    /// `k2` sweep at fixed `k1`.
    K2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub dropout: f64,
    pub seed: u64,
    pub dataset: ToyDatasetConfig,
    pub model: ToyNetworkConfig,
    pub ablate: Option<Ablation>,
    /// `k2` values for the k2 ablation.
    pub k2_values: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            milestones: t.milestones,
            decay: t.decay,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            nesterov: t.nesterov,
            dropout: t.dropout,
            seed: t.seed,
            dataset: ToyDatasetConfig::default(),
            model: ToyNetworkConfig::default(),
            ablate: None,
            k2_values: vec![0, 2, 4, 8],
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            milestones: self.milestones.clone(),
            decay: self.decay,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            nesterov: self.nesterov,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    /// `(label, model)` for each run implied by `ablate`.
    pub fn variants(&self) -> Result<Vec<(String, ToyNetworkConfig)>> {
        let base = &self.model;
        Ok(match self.ablate {
            None => vec![("base".into(), base.clone())],
            Some(Ablation::Position) => [Position::Fixed, Position::Unfixed]
                .into_iter()
                .map(|p| {
                    let name = if p == Position::Fixed { "fixed" } else { "unfixed" };
                    (name.to_string(), ToyNetworkConfig { position: p, ..base.clone() })
                })
                .collect(),
            Some(Ablation::K2) => {
                if self.k2_values.is_empty() {
                    return Err(invalid("train.k2_values is empty"));
                }
                if base.k1 == 0 && self.k2_values.contains(&0) {
                    return Err(invalid("k1 = 0 with k2 = 0 leaves no transform"));
                }
                self.k2_values.iter().map(|&k2| (format!("k2={k2}"), ToyNetworkConfig { k2, ..base.clone() })).collect()
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    #[default]
    Table,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write the report here instead of stdout.
    pub path: Option<PathBuf>,
    pub format: Format,
}
