//! Loading backbone weights from a named-tensor (safetensors) archive.
//!
//! Archive names are translated to backbone landmarks by a mapping table
//! (shipped as JSON). A backbone tensor is copied into the shared trunk if
//! the trunk owns it, and into every branch otherwise, so all branches start
//! from the same pretrained slice.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mgn::Mgn;
use crate::error::{Error, Result};

const TORCHVISION_RESNET50: &str = include_str!("../../assets/torchvision_resnet50.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightMapping {
    /// `(archive prefix, backbone prefix)` pairs, first match wins.
    pub rename: Vec<(String, String)>,
    /// Archive names starting or ending with any of these are skipped.
    #[serde(default)]
    pub ignore: Vec<String>,
}

impl WeightMapping {
    /// Mapping for torchvision's ResNet-50 `state_dict` names.
    pub fn torchvision_resnet50() -> Self {
        serde_json::from_str(TORCHVISION_RESNET50).expect("bundled mapping is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("weight mapping {}: {e}", path.display())))
    }

    fn is_ignored(&self, name: &str) -> bool {
        self.ignore
            .iter()
            .any(|p| name.starts_with(p.as_str()) || name.ends_with(p.as_str()))
    }

    /// Backbone name for an archive tensor, or `None` when unmapped/ignored.
    pub fn backbone_name(&self, archive_name: &str) -> Option<String> {
        if self.is_ignored(archive_name) {
            return None;
        }
        self.rename.iter().find_map(|(from, to)| {
            archive_name
                .strip_prefix(from.as_str())
                .map(|rest| format!("{to}{rest}"))
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Model parameters written.
    pub assigned: usize,
    /// Archive tensors that matched nothing in the model.
    pub unused: Vec<String>,
    /// Model backbone parameters the archive did not provide.
    pub missing: Vec<String>,
}

impl Mgn {
    /// Copies pretrained backbone tensors into the trunk and all branches.
    pub fn load_pretrained(&self, archive: &Path, mapping: &WeightMapping) -> Result<LoadReport> {
        let tensors = candle_core::safetensors::load(archive, self.device()).map_err(|e| Error::WeightLoad {
            tensor: archive.display().to_string(),
            reason: e.to_string(),
        })?;
        let store = self.params();
        let branch_prefixes: Vec<String> = self
            .config()
            .branches
            .iter()
            .map(|b| format!("branch.{}.", b.name))
            .collect();
        let mut report = LoadReport::default();
        let mut touched = std::collections::BTreeSet::new();
        let mut names: Vec<&String> = tensors.keys().collect();
        names.sort();
        for archive_name in names {
            let Some(logical) = mapping.backbone_name(archive_name) else {
                continue;
            };
            let trunk_name = format!("backbone.{logical}");
            let targets: Vec<String> = if store.get(&trunk_name).is_some() {
                vec![trunk_name]
            } else {
                branch_prefixes
                    .iter()
                    .map(|p| format!("{p}{logical}"))
                    .filter(|n| store.get(n).is_some())
                    .collect()
            };
            if targets.is_empty() {
                report.unused.push(archive_name.clone());
                continue;
            }
            let value = &tensors[archive_name];
            for target in targets {
                store.assign(&target, value).map_err(|e| match e {
                    Error::WeightLoad { reason, .. } => Error::WeightLoad {
                        tensor: archive_name.clone(),
                        reason,
                    },
                    other => other,
                })?;
                touched.insert(target);
                report.assigned += 1;
            }
        }
        report.missing = store
            .names()
            .into_iter()
            .filter(|n| (n.starts_with("backbone.") || is_branch_block(n)) && !touched.contains(n))
            .collect();
        if !report.missing.is_empty() {
            log::warn!("{} backbone tensors not found in {}", report.missing.len(), archive.display());
        }
        Ok(report)
    }
}

fn is_branch_block(name: &str) -> bool {
    name.starts_with("branch.") && name.contains(".layer")
}
