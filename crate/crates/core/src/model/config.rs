use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Normalization;
use crate::error::{Error, Result};

/// Backbone family. `Resnet50` is the full network; `Tiny` keeps the same
/// stage structure with narrow, shallow stages for CPU-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet50,
    Tiny,
}

/// Widths and depths of a bottleneck ResNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub stem_channels: usize,
    /// Bottleneck inner width of `res_conv2` .. `res_conv5`.
    pub widths: [usize; 4],
    /// Number of blocks in `res_conv2` .. `res_conv5`.
    pub depths: [usize; 4],
    pub expansion: usize,
}

impl BackboneKind {
    pub fn spec(self) -> BackboneSpec {
        match self {
            BackboneKind::Resnet50 => BackboneSpec {
                stem_channels: 64,
                widths: [64, 128, 256, 512],
                depths: [3, 4, 6, 3],
                expansion: 4,
            },
            BackboneKind::Tiny => BackboneSpec {
                stem_channels: 8,
                widths: [8, 16, 32, 64],
                depths: [1, 1, 2, 1],
                expansion: 4,
            },
        }
    }
}

impl BackboneSpec {
    /// Channels of the final stage output (the non-reduced global feature).
    pub fn out_channels(&self) -> usize {
        self.widths[3] * self.expansion
    }
}

/// A residual block position, written `res_conv<stage>_<block>` with stage
/// in 2..=5 and a 1-based block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Landmark {
    pub stage: usize,
    pub block: usize,
}

impl Landmark {
    pub const CANONICAL: Landmark = Landmark { stage: 4, block: 1 };

    pub fn validate_for(&self, spec: &BackboneSpec) -> Result<()> {
        if !(2..=5).contains(&self.stage) || self.block == 0 || self.block > spec.depths[self.stage - 2] {
            return Err(Error::Config(format!(
                "unknown backbone landmark `{self}` (stage 2-5, block 1..={})",
                if (2..=5).contains(&self.stage) {
                    spec.depths[self.stage - 2]
                } else {
                    0
                }
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Landmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "res_conv{}_{}", self.stage, self.block)
    }
}

impl FromStr for Landmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown backbone landmark `{s}`"));
        let rest = s.strip_prefix("res_conv").ok_or_else(bad)?;
        let (stage, block) = rest.split_once('_').ok_or_else(bad)?;
        Ok(Landmark {
            stage: stage.parse().map_err(|_| bad())?,
            block: block.parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for Landmark {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Landmark> for String {
    fn from(l: Landmark) -> Self {
        l.to_string()
    }
}

fn default_reduced_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub name: String,
    pub num_parts: usize,
    /// Stride of the first block of the last stage: 2 halves the map, 1
    /// keeps it.
    pub final_stage_stride: usize,
    #[serde(default = "default_reduced_dim")]
    pub reduced_dim: usize,
}

impl BranchConfig {
    /// Whole-image branch with a down-sampling last stage.
    pub fn global() -> Self {
        BranchConfig {
            name: "global".into(),
            num_parts: 1,
            final_stage_stride: 2,
            reduced_dim: 256,
        }
    }

    /// `n`-stripe branch keeping the last stage at full resolution.
    pub fn part(n: usize) -> Self {
        BranchConfig {
            name: format!("part{n}"),
            num_parts: n,
            final_stage_stride: 1,
            reduced_dim: 256,
        }
    }

    pub fn with_reduced_dim(mut self, dim: usize) -> Self {
        self.reduced_dim = dim;
        self
    }
}

fn default_split() -> Landmark {
    Landmark::CANONICAL
}

fn default_input_size() -> (usize, usize) {
    (384, 128)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Last block shared by all branches.
    #[serde(default = "default_split")]
    pub split_after: Landmark,
    pub branches: Vec<BranchConfig>,
    /// Number of training identities; filled in from the dataset when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// `(height, width)` of network inputs.
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
    /// Pixel normalization applied to inputs, matching the backbone's
    /// pretraining.
    #[serde(default)]
    pub normalization: Normalization,
}

impl ModelConfig {
    /// ResNet-50 with Global, Part-2 and Part-3 branches split after
    /// `res_conv4_1`.
    pub fn canonical() -> Self {
        ModelConfig {
            backbone: BackboneKind::Resnet50,
            split_after: Landmark::CANONICAL,
            branches: vec![BranchConfig::global(), BranchConfig::part(2), BranchConfig::part(3)],
            num_classes: None,
            input_size: default_input_size(),
            init_seed: 0,
            normalization: Normalization::default(),
        }
    }

    /// Canonical branch layout on the tiny backbone.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            ..Self::canonical()
        }
    }

    pub fn with_branches(mut self, branches: Vec<BranchConfig>) -> Self {
        self.branches = branches;
        self
    }

    pub fn spec(&self) -> BackboneSpec {
        self.backbone.spec()
    }

    /// Output map size of a branch for the configured input.
    pub fn branch_map_size(&self, branch: &BranchConfig) -> (usize, usize) {
        let (mut h, mut w) = self.input_size;
        // stem conv, max-pool, res_conv3, res_conv4
        for _ in 0..4 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        if branch.final_stage_stride == 2 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Length of the concatenated test feature.
    pub fn feature_dim(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.reduced_dim * if b.num_parts > 1 { b.num_parts + 1 } else { 1 })
            .sum()
    }

    pub fn branch(&self, name: &str) -> Option<&BranchConfig> {
        self.branches.iter().find(|b| b.name == name)
    }

    pub fn branch_names(&self) -> Vec<&str> {
        self.branches.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec();
        self.split_after.validate_for(&spec)?;
        if self.branches.is_empty() {
            return Err(Error::Config("model needs at least one branch".into()));
        }
        let mut names = BTreeSet::new();
        for b in &self.branches {
            if !names.insert(b.name.as_str()) {
                return Err(Error::Config(format!("duplicate branch name `{}`", b.name)));
            }
            if b.name.is_empty() || b.name.contains(['.', '/']) {
                return Err(Error::Config(format!("invalid branch name `{}`", b.name)));
            }
            if b.num_parts == 0 {
                return Err(Error::Config(format!("branch `{}` needs num_parts >= 1", b.name)));
            }
            if !matches!(b.final_stage_stride, 1 | 2) {
                return Err(Error::Config(format!(
                    "branch `{}` final_stage_stride must be 1 or 2",
                    b.name
                )));
            }
            if b.reduced_dim == 0 {
                return Err(Error::Config(format!("branch `{}` needs reduced_dim >= 1", b.name)));
            }
            let (h, _) = self.branch_map_size(b);
            if h % b.num_parts != 0 {
                return Err(Error::Config(format!(
                    "branch `{}`: map height {h} is not divisible into {} stripes",
                    b.name, b.num_parts
                )));
            }
        }
        if self.split_after.stage == 5 {
            let first = self.branches[0].final_stage_stride;
            if self.branches.iter().any(|b| b.final_stage_stride != first) {
                return Err(Error::Config(format!(
                    "splitting after {} shares the last-stage stride, branches must agree on it",
                    self.split_after
                )));
            }
        }
        if self.input_size.0 < 32 || self.input_size.1 < 32 {
            return Err(Error::Config(format!("input size {:?} too small", self.input_size)));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Content hash of the architecture (class count and init seed
    /// excluded), used to match feature files with each other.
    pub fn hash(&self) -> String {
        let arch = ModelConfig {
            num_classes: None,
            init_seed: 0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&arch).expect("model config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}
