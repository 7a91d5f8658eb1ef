use serde::{Deserialize, Serialize};

use crate::diffcore::SgdConfig;
use crate::error::{Error, Result};
use crate::labeler::{LabelMethod, LabelerConfig};
use crate::nets::{DistillOn, ModelSpec};
use crate::randmix::RandMixConfig;
use crate::synthdata::{self, DomainSequence, DomainSpec};

/// Widths of the trainable network; input size and class count come from the
/// domain sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub hidden: Vec<usize>,
    pub bottleneck: Option<[usize; 2]>,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelSpec::desk_scale(1, 1);
        Self { hidden: d.hidden, bottleneck: d.bottleneck }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Preset name; ignored when `domains` is given.
    pub sequence: String,
    /// Inline domain list replacing the preset.
    pub domains: Option<Vec<DomainSpec>>,
    /// Optional permutation of the domain order.
    pub order: Option<Vec<usize>>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Memory exemplars per target-stage batch.
    pub replay_n: usize,
    pub source_fraction: f64,
    pub memory_capacity: usize,
    pub seed: u64,
    pub model: ModelShape,
    pub sgd: SgdConfig,
    pub randmix: RandMixConfig,
    pub labeler: LabelerConfig,
    pub disable_randmix: bool,
    pub disable_pca: bool,
    pub disable_memory: bool,
    pub disable_distill: bool,
    /// Drops the previous-prototype terms of the contrastive loss.
    pub disable_previous_prototypes: bool,
    pub distill_on: DistillOn,
    /// Single source → single target adaptation without memory,
    /// distillation or previous prototypes.
    pub stationary: bool,
    /// Also evaluate the untrained model (reported separately).
    pub untrained_row: bool,
    /// Record the accuracy of every labeler at each target epoch.
    pub diagnose_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sequence: "rot5".into(),
            domains: None,
            order: None,
            epochs: 30,
            steps_per_epoch: 25,
            batch_size: 64,
            replay_n: 16,
            source_fraction: 0.8,
            memory_capacity: 200,
            seed: 2022,
            model: ModelShape::default(),
            sgd: SgdConfig::default(),
            randmix: RandMixConfig::default(),
            labeler: LabelerConfig::default(),
            disable_randmix: false,
            disable_pca: false,
            disable_memory: false,
            disable_distill: false,
            disable_previous_prototypes: false,
            distill_on: DistillOn::Logits,
            stationary: false,
            untrained_row: false,
            diagnose_labels: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.replay_n >= self.batch_size {
            return Err(Error::Config(format!(
                "replay_n ({}) must be smaller than batch_size ({})",
                self.replay_n, self.batch_size
            )));
        }
        if !(self.source_fraction > 0.0 && self.source_fraction < 1.0) {
            return Err(Error::Config(format!("source_fraction must be in (0,1), got {}", self.source_fraction)));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory_capacity must be positive".into()));
        }
        if self.model.hidden.contains(&0) || self.model.bottleneck.is_some_and(|b| b.contains(&0)) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.sgd.validate()?;
        self.randmix.validate()?;
        self.labeler.validate()?;
        let seq = self.resolve_sequence()?;
        if self.stationary && seq.domains.len() != 2 {
            return Err(Error::Config(format!(
                "stationary mode needs exactly 2 domains, sequence has {}",
                seq.domains.len()
            )));
        }
        Ok(())
    }

    pub fn resolve_sequence(&self) -> Result<DomainSequence> {
        let seq = match &self.domains {
            Some(domains) => DomainSequence { name: "custom".into(), domains: domains.clone() },
            None => synthdata::preset(&self.sequence)?,
        };
        seq.validate()?;
        match &self.order {
            Some(order) => seq.permuted(order),
            None => Ok(seq),
        }
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec { input_dim, hidden: self.model.hidden.clone(), bottleneck: self.model.bottleneck, classes }
    }

    /// Settings of the equivalent continual run for stationary mode.
    pub fn with_stationary_removals(&self) -> Self {
        Self {
            stationary: false,
            disable_memory: true,
            disable_distill: true,
            disable_previous_prototypes: true,
            ..self.clone()
        }
    }
}

/// Ablations offered by `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    NoRandMix,
    Labeler(LabelMethod),
    NoPca,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::NoRandMix,
        AblationVariant::Labeler(LabelMethod::Softmax),
        AblationVariant::Labeler(LabelMethod::ShotStyle),
        AblationVariant::NoPca,
    ];

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        match self {
            AblationVariant::NoRandMix => out.disable_randmix = true,
            AblationVariant::Labeler(m) => out.labeler.method = m,
            AblationVariant::NoPca => out.disable_pca = true,
        }
        out
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationVariant::NoRandMix => f.write_str("no_randmix"),
            AblationVariant::Labeler(m) => write!(f, "labeler={m}"),
            AblationVariant::NoPca => f.write_str("no_pca"),
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.to_string() == s).ok_or_else(|| {
            let names: Vec<String> = Self::ALL.iter().map(ToString::to_string).collect();
            Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn small_batch_is_rejected() {
        let cfg = RunConfig { batch_size: 1, replay_n: 0, ..Default::default() };
        assert!(cfg.validate().unwrap_err().is_usage());
    }

    #[test]
    fn stationary_needs_two_domains() {
        let cfg = RunConfig { stationary: true, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { stationary: true, order: None, ..Default::default() };
        let mut seq = cfg.resolve_sequence().unwrap();
        seq.domains.truncate(2);
        RunConfig { domains: Some(seq.domains), ..cfg }.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3, "epoch": 4}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn ablation_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.to_string().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("no_memory".parse::<AblationVariant>().is_err());
        let cfg = AblationVariant::Labeler(LabelMethod::Softmax).apply(&RunConfig::default());
        assert_eq!(cfg.labeler.method, LabelMethod::Softmax);
    }
}
