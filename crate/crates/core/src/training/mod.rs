//! Two-stage training (domain-specific classifiers, then mapper plus
//! domain-invariant classifier), the pooled ERM baseline and
//! leave-one-source-out selection of the stage-2 loss weights.

mod baseline;
mod engine;
mod invariant;
mod select;
mod specific;

use std::collections::HashSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{MultiDomainDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, ReconstructionKind, UncertaintyVariant};
use crate::nets::{Backbone, Classifier, ClassifierSpec, Mapper, MapperInit, MapperSpec};

pub use baseline::train_erm_baseline;
pub use engine::{EpochRecord, MetricsLog, RunState};
pub use invariant::{stage2_step_gradients, train_domain_invariant, InvariantMetrics, InvariantOutcome};
pub use select::{select_lambdas, LambdaSelection};
pub use specific::{freeze, train_bank, train_domain_specific, SpecificClassifierBank, SpecificMetrics, SpecificOutcome};

fn default_learning_rates() -> Vec<f64> {
    vec![0.1, 0.03, 0.01]
}

fn default_momentum() -> f64 {
    0.9
}

fn default_epochs() -> usize {
    30
}

fn default_patience() -> Option<usize> {
    Some(5)
}

fn default_batch() -> usize {
    16
}

fn default_grid() -> Vec<f64> {
    vec![0.1, 1.0, 10.0]
}

fn default_depth() -> usize {
    3
}

fn default_base() -> usize {
    16
}

fn default_backbone() -> Backbone {
    Backbone::DeskCnn
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Candidate constant learning rates; each run keeps the one with the
    /// best source-validation score.
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f64>,
    /// Per-stage replacements for `learning_rates`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rates_stage1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rates_stage2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rates_baseline: Option<Vec<f64>>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// L2 penalty added to every gradient after clipping.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs_stage1: usize,
    #[serde(default = "default_epochs")]
    pub epochs_stage2: usize,
    #[serde(default = "default_epochs")]
    pub epochs_baseline: usize,
    /// Epochs without a strictly better validation score before stopping.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    /// Samples drawn from each source domain per optimization step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Global gradient-norm clip applied before each update.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub uncertainty: UncertaintyVariant,
    #[serde(default)]
    pub reconstruction: ReconstructionKind,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_grid")]
    pub lambda2_grid: Vec<f64>,
    #[serde(default = "default_grid")]
    pub lambda3_grid: Vec<f64>,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    #[serde(default = "default_depth")]
    pub mapper_depth: usize,
    #[serde(default = "default_base")]
    pub mapper_base_channels: usize,
    #[serde(default)]
    pub mapper_init: MapperInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rates: default_learning_rates(),
            learning_rates_stage1: None,
            learning_rates_stage2: None,
            learning_rates_baseline: None,
            momentum: default_momentum(),
            weight_decay: 0.0,
            epochs_stage1: default_epochs(),
            epochs_stage2: default_epochs(),
            epochs_baseline: default_epochs(),
            patience: default_patience(),
            batch_size: default_batch(),
            grad_clip: default_clip(),
            seed: 0,
            uncertainty: UncertaintyVariant::Entropy,
            reconstruction: ReconstructionKind::L2,
            weights: LossWeights::default(),
            lambda2_grid: default_grid(),
            lambda3_grid: default_grid(),
            backbone: default_backbone(),
            mapper_depth: default_depth(),
            mapper_base_channels: default_base(),
            mapper_init: MapperInit::Identity,
        }
    }
}

/// Training run a learning-rate grid applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Specific,
    Invariant,
    Baseline,
}

impl TrainConfig {
    /// Candidate learning rates for `stage`.
    pub fn learning_rates_for(&self, stage: Stage) -> &[f64] {
        let own = match stage {
            Stage::Specific => &self.learning_rates_stage1,
            Stage::Invariant => &self.learning_rates_stage2,
            Stage::Baseline => &self.learning_rates_baseline,
        };
        own.as_deref().unwrap_or(&self.learning_rates)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        let grids = [
            Some(&self.learning_rates),
            self.learning_rates_stage1.as_ref(),
            self.learning_rates_stage2.as_ref(),
            self.learning_rates_baseline.as_ref(),
        ];
        if grids.into_iter().flatten().any(|g| g.is_empty() || g.iter().any(|lr| !(lr.is_finite() && *lr > 0.0))) {
            return cfg("learning_rates must be a nonempty list of positive values");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg("momentum must be in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return cfg("weight_decay must be a nonnegative number");
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 || self.epochs_baseline == 0 {
            return cfg("epoch counts must be positive");
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return cfg("grad_clip must be positive");
            }
        }
        self.weights.validate()
    }

    pub fn classifier_spec(&self, dataset: &MultiDomainDataset) -> ClassifierSpec {
        ClassifierSpec {
            backbone: self.backbone,
            num_classes: dataset.num_classes,
            input: dataset.image_shape,
        }
    }

    pub fn mapper_spec(&self, dataset: &MultiDomainDataset) -> MapperSpec {
        MapperSpec {
            depth: self.mapper_depth,
            base_channels: self.mapper_base_channels,
            input: dataset.image_shape,
            init: self.mapper_init,
        }
    }

    pub fn classifier(&self, dataset: &MultiDomainDataset) -> Result<Classifier> {
        Classifier::new(self.classifier_spec(dataset))
    }

    pub fn mapper(&self, dataset: &MultiDomainDataset) -> Result<Mapper> {
        Mapper::new(self.mapper_spec(dataset))
    }
}

/// Records every sample id that enters a training or model-selection batch,
/// so callers can prove a held-out domain was never touched.
#[derive(Debug, Default)]
pub struct SampleAudit {
    seen: Mutex<HashSet<u64>>,
}

impl SampleAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) {
        let mut seen = self.seen.lock().expect("audit lock");
        seen.extend(samples.into_iter().map(|s| s.uid));
    }

    pub fn contains(&self, uid: u64) -> bool {
        self.seen.lock().expect("audit lock").contains(&uid)
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("audit lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of samples of `domain` that were recorded.
    pub fn touched(&self, dataset: &MultiDomainDataset, domain: usize) -> usize {
        let seen = self.seen.lock().expect("audit lock");
        dataset.domains[domain].samples.iter().filter(|s| seen.contains(&s.uid)).count()
    }
}

/// Read-only view of the source domains a run may use.
#[derive(Clone, Copy)]
pub struct Sources<'a> {
    pub dataset: &'a MultiDomainDataset,
    pub domains: &'a [usize],
    pub audit: Option<&'a SampleAudit>,
}

impl<'a> Sources<'a> {
    pub fn new(dataset: &'a MultiDomainDataset, domains: &'a [usize]) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Precondition("at least one source domain is required".into()));
        }
        for &d in domains {
            if d >= dataset.num_domains() {
                return Err(Error::Precondition(format!("source domain {d} does not exist")));
            }
        }
        let unique: HashSet<_> = domains.iter().collect();
        if unique.len() != domains.len() {
            return Err(Error::Precondition("source domains must be distinct".into()));
        }
        Ok(Sources {
            dataset,
            domains,
            audit: None,
        })
    }

    pub fn with_audit(mut self, audit: &'a SampleAudit) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn split(&self, domain: usize, split: Split) -> Vec<&'a Sample> {
        let samples = self.dataset.domains[domain].split_samples(split);
        if let Some(audit) = self.audit {
            audit.record(samples.iter().copied());
        }
        samples
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_rates_fall_back_to_the_shared_grid() {
        let mut c = TrainConfig { learning_rates: vec![0.03], ..TrainConfig::default() };
        c.learning_rates_stage1 = Some(vec![0.1]);
        assert_eq!(c.learning_rates_for(Stage::Specific), &[0.1]);
        assert_eq!(c.learning_rates_for(Stage::Invariant), &[0.03]);
        assert_eq!(c.learning_rates_for(Stage::Baseline), &[0.03]);
        c.validate().unwrap();
        c.learning_rates_baseline = Some(vec![]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn weight_decay_must_be_nonnegative() {
        let mut c = TrainConfig::default();
        c.weight_decay = 1e-3;
        c.validate().unwrap();
        c.weight_decay = -1e-3;
        assert!(c.validate().unwrap_err().to_string().contains("weight_decay"));
        c.weight_decay = f64::NAN;
        assert!(c.validate().is_err());
    }
}
