use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SamplerConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{BranchConfig, ModelConfig};

/// Piecewise-constant learning rate: `(first epoch, rate)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule(vec![(0, 0.01), (40, 1e-3), (60, 1e-4)])
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self.0.first() {
            Some((0, _)) => {}
            _ => return Err(Error::Config("lr schedule must start at epoch 0".into())),
        }
        for w in self.0.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "lr schedule epochs must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some((e, r)) = self.0.iter().find(|(_, r)| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!("lr at epoch {e} must be > 0, got {r}")));
        }
        Ok(())
    }

    /// Rate in effect at `epoch` (no range check).
    pub fn rate(&self, epoch: usize) -> f64 {
        self.0
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map_or(0.0, |(_, r)| *r)
    }
}

fn default_epochs() -> usize {
    80
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_flip() -> f64 {
    0.5
}
fn default_keep() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Probability of a horizontal flip per training image.
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    /// Epoch checkpoints retained on disk (older ones are pruned).
    #[serde(default = "default_keep")]
    pub keep_checkpoints: usize,
    /// Seeds the augmentation stream.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Full-scale settings: ResNet-50 MGN, 80 epochs, SGD momentum 0.9, decay at 40 and 60.
    pub fn canonical() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: LrSchedule::default(),
            max_steps: None,
            flip_prob: default_flip(),
            keep_checkpoints: default_keep(),
            seed: 0,
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::canonical(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be > 0".into()));
        }
        self.schedule.validate()?;
        if let Some((e, _)) = self.schedule.0.iter().find(|(e, _)| *e >= self.epochs) {
            return Err(Error::Config(format!("lr milestone {e} is beyond the last epoch {}", self.epochs - 1)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        if self.keep_checkpoints == 0 {
            return Err(Error::Config("keep_checkpoints must be >= 1".into()));
        }
        self.sampler.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// Hash of the full training configuration, first 16 hex digits.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

/// Learning rate for `epoch` under `config`'s schedule.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Input(format!(
            "epoch {epoch} outside training range 0..{}",
            config.epochs
        )));
    }
    Ok(config.schedule.rate(epoch))
}

/// Branch and loss layouts from the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    /// Global, Part-2, Part-3.
    Canonical,
    /// Global, Part-2.
    WithoutPart3,
    /// Global, Part-2, Part-3, Part-4.
    WithPart4,
    /// Global, Part-2, Part-4.
    Part2And4,
    /// Global, Part-3, Part-4.
    Part3And4,
    /// Canonical branches, softmax only.
    WithoutTriplet,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Canonical,
        AblationVariant::WithoutPart3,
        AblationVariant::WithPart4,
        AblationVariant::Part2And4,
        AblationVariant::Part3And4,
        AblationVariant::WithoutTriplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Canonical => "canonical",
            AblationVariant::WithoutPart3 => "w/o Part-3",
            AblationVariant::WithPart4 => "w/ Part-4",
            AblationVariant::Part2And4 => "Part2+4",
            AblationVariant::Part3And4 => "Part3+4",
            AblationVariant::WithoutTriplet => "w/o TP",
        }
    }

    pub fn part_branches(self) -> &'static [usize] {
        match self {
            AblationVariant::Canonical | AblationVariant::WithoutTriplet => &[2, 3],
            AblationVariant::WithoutPart3 => &[2],
            AblationVariant::WithPart4 => &[2, 3, 4],
            AblationVariant::Part2And4 => &[2, 4],
            AblationVariant::Part3And4 => &[3, 4],
        }
    }

    pub fn branches(self) -> Vec<BranchConfig> {
        std::iter::once(BranchConfig::global())
            .chain(self.part_branches().iter().map(|&n| BranchConfig::part(n)))
            .collect()
    }

    /// Rewrites the branch list and loss flags of `base`, keeping the
    /// reduced width of its first branch.
    pub fn apply(self, mut base: TrainConfig) -> TrainConfig {
        let dim = base.model.branches.first().map(|b| b.reduced_dim);
        let mut branches = self.branches();
        if let Some(dim) = dim {
            branches = branches.into_iter().map(|b| b.with_reduced_dim(dim)).collect();
        }
        base.model.branches = branches;
        base.loss.enable_triplet = self != AblationVariant::WithoutTriplet;
        base
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    /// Accepts the table row names with or without a leading `MGN`, in any
    /// case, and with or without parentheses and spaces.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && !matches!(c, '(' | ')' | '-' | '_'))
            .collect::<String>()
            .to_lowercase();
        let key = key.strip_prefix("mgn").unwrap_or(&key);
        let v = match key {
            "" | "canonical" => AblationVariant::Canonical,
            "w/opart3" | "wopart3" => AblationVariant::WithoutPart3,
            "w/part4" | "wpart4" => AblationVariant::WithPart4,
            "part2+4" | "part24" => AblationVariant::Part2And4,
            "part3+4" | "part34" => AblationVariant::Part3And4,
            "w/otp" | "wotp" => AblationVariant::WithoutTriplet,
            _ => {
                let names: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                return Err(Error::Config(format!(
                    "unknown variant `{s}`; expected one of: {}",
                    names.join(", ")
                )));
            }
        };
        Ok(v)
    }
}

/// Canonical training configuration with the variant's branches and loss
/// flags.
pub fn make_ablation_config(variant: AblationVariant) -> TrainConfig {
    variant.apply(TrainConfig::canonical())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let c = TrainConfig::canonical();
        assert_eq!(lr_at(0, &c).unwrap(), 0.01);
        assert_eq!(lr_at(39, &c).unwrap(), 0.01);
        assert_eq!(lr_at(40, &c).unwrap(), 1e-3);
        assert_eq!(lr_at(60, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(79, &c).unwrap(), 1e-4);
        assert!(matches!(lr_at(80, &c), Err(Error::Input(_))));
        let rates: Vec<f64> = (0..80).map(|e| lr_at(e, &c).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bad_schedules_rejected() {
        for s in [vec![(1, 0.1)], vec![(0, 0.1), (0, 0.01)], vec![(0, 0.0)], vec![]] {
            assert!(LrSchedule(s).validate().is_err());
        }
    }

    #[test]
    fn variant_names_parse() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
            assert_eq!(format!("MGN {}", v.name()).parse::<AblationVariant>().unwrap(), v);
        }
        assert_eq!("MGN (Part2+4)".parse::<AblationVariant>().unwrap(), AblationVariant::Part2And4);
        assert_eq!("MGN".parse::<AblationVariant>().unwrap(), AblationVariant::Canonical);
        let err = "Part5".parse::<AblationVariant>().unwrap_err();
        assert!(err.to_string().contains("w/o TP"));
    }

    #[test]
    fn variant_branch_lists() {
        let names = |v: AblationVariant| -> Vec<String> {
            make_ablation_config(v).model.branches.into_iter().map(|b| b.name).collect()
        };
        assert_eq!(names(AblationVariant::WithPart4), ["global", "part2", "part3", "part4"]);
        assert_eq!(names(AblationVariant::Part2And4), ["global", "part2", "part4"]);
        assert_eq!(names(AblationVariant::Canonical), ["global", "part2", "part3"]);
        let no_tp = make_ablation_config(AblationVariant::WithoutTriplet);
        assert!(!no_tp.loss.enable_triplet);
        let mut expect = TrainConfig::canonical();
        expect.loss.enable_triplet = false;
        assert_eq!(no_tp, expect);
    }

    #[test]
    fn canonical_config_is_valid() {
        TrainConfig::canonical().validate().unwrap();
        let mut c = TrainConfig::canonical();
        c.epochs = 50;
        assert!(c.validate().is_err());
    }
}
