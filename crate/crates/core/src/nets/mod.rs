//! Network contracts: the domain-specific / domain-invariant classifier, the
//! encoder-decoder mapper, and their checkpoint container.

mod checkpoint;
mod classifier;
pub(crate) mod layers;
mod mapper;

pub use checkpoint::{param_checksum, Checkpoint, CheckpointHeader, NetworkSpec, StageTag, FORMAT_VERSION, MAGIC};
pub use classifier::{Backbone, Classifier, ClassifierSpec, ClassifierTrace, FeatureLayer};
pub use mapper::{Mapper, MapperInit, MapperSpec, MapperTrace};

use crate::error::Result;

/// Anything that maps an image to class logits and exposes a feature layer.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, image: &[f64]) -> Result<Vec<f64>>;

    fn predict(&self, image: &[f64]) -> Result<usize> {
        Ok(crate::losses::argmax(&self.logits(image)?))
    }

    fn extract_features(&self, images: &[&[f64]], layer: FeatureLayer) -> Result<Vec<Vec<f64>>>;
}

/// A trained domain-invariant model: predictions are `classifier(mapper(x))`.
#[derive(Clone, Debug)]
pub struct InvariantModel {
    pub mapper: Mapper,
    pub mapper_params: Vec<f64>,
    pub classifier: Classifier,
    pub classifier_params: Vec<f64>,
}

impl InvariantModel {
    pub fn map(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.mapper.map(&self.mapper_params, image)
    }
}

impl Predictor for InvariantModel {
    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn logits(&self, image: &[f64]) -> Result<Vec<f64>> {
        let mapped = self.map(image)?;
        self.classifier.logits(&self.classifier_params, &mapped)
    }

    /// Features of the invariant classifier evaluated on mapped images.
    fn extract_features(&self, images: &[&[f64]], layer: FeatureLayer) -> Result<Vec<Vec<f64>>> {
        let mapped = self.mapper.map_batch(&self.mapper_params, images)?;
        let refs: Vec<&[f64]> = mapped.iter().map(Vec::as_slice).collect();
        self.classifier.extract_features(&self.classifier_params, &refs, layer)
    }
}

/// A single classifier together with its parameters (baseline or frozen
/// domain-specific network).
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub net: Classifier,
    pub params: Vec<f64>,
}

impl Predictor for TrainedClassifier {
    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn logits(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.net.logits(&self.params, image)
    }

    fn extract_features(&self, images: &[&[f64]], layer: FeatureLayer) -> Result<Vec<Vec<f64>>> {
        self.net.extract_features(&self.params, images, layer)
    }
}
