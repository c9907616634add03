//! Multi-domain image datasets: the in-memory model, the directory loader,
//! the synthetic cue-shift generator and the leave-one-domain-out protocol.

mod folder;
mod synthetic;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use folder::{decode_image, load_image_folder};
pub use synthetic::{
    export_dataset, generate_cue_probe, generate_synthetic, CueKind, CueMode, ExportManifest, ManifestEntry,
    SyntheticDomainSpec, GLYPHS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// The injected synthetic cue of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueDescriptor {
    pub kind: CueKind,
    /// Index of the cue value (tint colour, stripe frequency, watermark glyph).
    pub param: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Channel-major pixels in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: usize,
    pub domain_id: usize,
    /// Unique within a dataset: `domain_id << 32 | index`.
    pub uid: u64,
    pub cue: Option<CueDescriptor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train > 0.0 && self.val >= 0.0 && self.train + self.val < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "split fractions train={} val={} must be positive and sum to less than 1",
                self.train, self.val
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub samples: Vec<Sample>,
    /// Split of each sample, index-aligned with `samples`.
    pub splits: Vec<Split>,
}

impl Domain {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&Sample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiDomainDataset {
    pub domains: Vec<Domain>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub image_shape: ImageShape,
}

impl MultiDomainDataset {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.domains.iter().map(Domain::len).sum()
    }

    /// Checks the structural invariants: labels in range, pixel values in
    /// `[0, 1]`, every class present in every domain's train split.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data("a dataset needs at least two classes".into()));
        }
        for (d, domain) in self.domains.iter().enumerate() {
            if domain.splits.len() != domain.samples.len() {
                return Err(Error::Data(format!("domain {} has an incomplete split assignment", domain.name)));
            }
            let mut seen = vec![false; self.num_classes];
            for (sample, split) in domain.samples.iter().zip(&domain.splits) {
                if sample.label >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: sample.label,
                        num_classes: self.num_classes,
                    });
                }
                if sample.domain_id != d {
                    return Err(Error::Data(format!("sample {} has domain id {} inside domain {d}", sample.uid, sample.domain_id)));
                }
                if sample.image.len() != self.image_shape.len() {
                    return Err(Error::shape(self.image_shape, format!("{} values", sample.image.len())));
                }
                if sample.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data(format!("sample {} has pixels outside [0, 1]", sample.uid)));
                }
                if *split == Split::Train {
                    seen[sample.label] = true;
                }
            }
            let present = seen.iter().filter(|s| **s).count();
            if present < 2 {
                return Err(Error::Data(format!("domain {} has fewer than two classes", domain.name)));
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::MissingClass {
                    domain: domain.name.clone(),
                    class: self.class_names[missing].clone(),
                });
            }
        }
        Ok(())
    }
}

/// Assigns train/val/test per class so every class lands in the train split.
pub(crate) fn assign_splits(labels: &[usize], num_classes: usize, fractions: SplitFractions, seed: u64, domain: usize) -> Vec<Split> {
    let mut splits = vec![Split::Test; labels.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng::stream(seed, "split", &[domain as u64, class as u64]));
        let n = members.len();
        let n_train = ((n as f64 * fractions.train).round() as usize).clamp(1, n);
        let n_val = ((n as f64 * fractions.val).round() as usize).min(n - n_train);
        for (rank, &i) in members.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}

/// One leave-one-domain-out fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolFold {
    pub target: usize,
    pub sources: Vec<usize>,
}

pub fn make_loo_splits(dataset: &MultiDomainDataset) -> Result<Vec<ProtocolFold>> {
    make_loo_folds(dataset.num_domains())
}

pub fn make_loo_folds(num_domains: usize) -> Result<Vec<ProtocolFold>> {
    if num_domains < 2 {
        return Err(Error::Precondition(format!(
            "leave-one-domain-out needs at least two domains, got {num_domains}"
        )));
    }
    Ok((0..num_domains)
        .map(|target| ProtocolFold {
            target,
            sources: (0..num_domains).filter(|&d| d != target).collect(),
        })
        .collect())
}
