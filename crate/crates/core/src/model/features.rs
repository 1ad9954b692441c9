use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which embedding of a branch a feature is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    /// Globally max-pooled branch output before reduction (`z_g`).
    GlobalRaw,
    /// Reduced global feature (`f_g`).
    GlobalReduced,
    /// Reduced feature of stripe `i` (1-based, top to bottom).
    Part(usize),
}

/// A named embedding, e.g. `f_p2@part3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureId {
    pub branch: String,
    pub kind: FeatureKind,
}

impl FeatureId {
    pub fn new(branch: &str, kind: FeatureKind) -> Self {
        FeatureId {
            branch: branch.to_string(),
            kind,
        }
    }

    pub fn is_reduced(&self) -> bool {
        !matches!(self.kind, FeatureKind::GlobalRaw)
    }

    pub(crate) fn kind_tag(&self) -> String {
        match self.kind {
            FeatureKind::GlobalRaw => "z_g".into(),
            FeatureKind::GlobalReduced => "f_g".into(),
            FeatureKind::Part(i) => format!("f_p{i}"),
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind_tag(), self.branch)
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid feature name `{s}`"));
        let (tag, branch) = s.split_once('@').ok_or_else(bad)?;
        let kind = match tag {
            "z_g" => FeatureKind::GlobalRaw,
            "f_g" => FeatureKind::GlobalReduced,
            t => FeatureKind::Part(
                t.strip_prefix("f_p")
                    .and_then(|i| i.parse().ok())
                    .filter(|&i| i >= 1)
                    .ok_or_else(bad)?,
            ),
        };
        if branch.is_empty() {
            return Err(bad());
        }
        Ok(FeatureId::new(branch, kind))
    }
}

impl TryFrom<String> for FeatureId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureId> for String {
    fn from(f: FeatureId) -> Self {
        f.to_string()
    }
}

/// Outputs of one branch for a batch.
#[derive(Debug, Clone)]
pub struct BranchEmbedding {
    pub name: String,
    /// `[N, C_z]`
    pub z_g: Tensor,
    /// `[N, d]`
    pub f_g: Tensor,
    /// One `[N, d]` tensor per stripe, top to bottom; empty for a
    /// single-part branch.
    pub parts: Vec<Tensor>,
    /// Final branch feature map, channels-last `[N, H, W, C_z]`.
    pub map: Tensor,
}

/// All per-branch features of a batch of images.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub branches: Vec<BranchEmbedding>,
}

impl EmbeddingBundle {
    pub fn get(&self, id: &FeatureId) -> Option<&Tensor> {
        let b = self.branches.iter().find(|b| b.name == id.branch)?;
        match id.kind {
            FeatureKind::GlobalRaw => Some(&b.z_g),
            FeatureKind::GlobalReduced => Some(&b.f_g),
            FeatureKind::Part(i) => b.parts.get(i.checked_sub(1)?),
        }
    }

    /// Reduced features in concatenation order: per branch, `f_g` followed
    /// by the stripes.
    pub fn reduced(&self) -> Vec<(FeatureId, &Tensor)> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.push((FeatureId::new(&b.name, FeatureKind::GlobalReduced), &b.f_g));
            for (i, p) in b.parts.iter().enumerate() {
                out.push((FeatureId::new(&b.name, FeatureKind::Part(i + 1)), p));
            }
        }
        out
    }

    /// Every feature, raw globals included.
    pub fn all(&self) -> Vec<(FeatureId, &Tensor)> {
        let mut out: Vec<_> = self
            .branches
            .iter()
            .map(|b| (FeatureId::new(&b.name, FeatureKind::GlobalRaw), &b.z_g))
            .collect();
        out.extend(self.reduced());
        out
    }

    /// `[N, D]` concatenation of the reduced features.
    pub fn concat(&self) -> Result<Tensor> {
        let parts: Vec<Tensor> = self.reduced().into_iter().map(|(_, t)| t.clone()).collect();
        Ok(Tensor::cat(&parts, 1)?)
    }
}
