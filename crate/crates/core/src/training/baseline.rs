use super::engine::{balanced_batches, fit_over_learning_rates, EpochRecord, Objective, Validation};
use super::specific::{accuracy_of, classifier_gradient, images, Term};
use super::{Sources, Stage, TrainConfig};
use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, UncertaintyVariant};
use crate::nets::{Classifier, TrainedClassifier};
use crate::rng;

struct Erm<'a> {
    net: &'a Classifier,
    train: Vec<Vec<&'a Sample>>,
    val: Vec<&'a Sample>,
    batch: usize,
    seed: u64,
}

impl Objective for Erm<'_> {
    type Step = Vec<Vec<usize>>;

    fn init(&self) -> Vec<Vec<f64>> {
        vec![self.net.init_params(self.seed)]
    }

    fn plan_epoch(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
        let lens: Vec<usize> = self.train.iter().map(Vec::len).collect();
        let mean = lens.iter().sum::<usize>() / lens.len();
        balanced_batches(&lens, mean.div_ceil(self.batch), self.batch, rng)
    }

    fn gradient(&self, params: &[Vec<f64>], step: &Vec<Vec<usize>>) -> Result<(Vec<Vec<f64>>, LossTerms)> {
        let batch: Vec<&Sample> = step
            .iter()
            .enumerate()
            .flat_map(|(d, idx)| idx.iter().map(move |&i| self.train[d][i]))
            .collect();
        let weight = 1.0 / batch.len() as f64;
        let terms: Vec<Term> = batch.iter().map(|s| Term::Classify { sample: s, weight }).collect();
        let (grad, ce, _) = classifier_gradient(self.net, &params[0], &terms, UncertaintyVariant::Entropy)?;
        Ok((
            vec![grad],
            LossTerms {
                classification: ce,
                total: ce,
                ..Default::default()
            },
        ))
    }

    fn validate(&self, params: &[Vec<f64>]) -> Result<Validation> {
        let logits = self.net.logits_batch(&params[0], &images(&self.val))?;
        let mut ce = 0.0;
        for (l, s) in logits.iter().zip(&self.val) {
            ce += losses::cross_entropy(l, s.label)?;
        }
        Ok(Validation {
            accuracy: accuracy_of(self.net, &params[0], &self.val)?,
            objective: ce / self.val.len() as f64,
        })
    }
}

/// Empirical risk minimization: one classifier trained with cross-entropy on
/// the pooled source domains (one balanced batch per domain per step).
pub fn train_erm_baseline(sources: &Sources<'_>, config: &TrainConfig) -> Result<(TrainedClassifier, Vec<EpochRecord>)> {
    config.validate()?;
    let net = config.classifier(sources.dataset)?;
    let train: Vec<Vec<&Sample>> = sources.domains.iter().map(|&d| sources.split(d, Split::Train)).collect();
    if train.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("every source domain needs training samples".into()));
    }
    let val: Vec<&Sample> = sources.domains.iter().flat_map(|&d| sources.split(d, Split::Val)).collect();
    if val.is_empty() {
        return Err(Error::Precondition("source domains have no validation samples".into()));
    }
    let erm = Erm {
        net: &net,
        train,
        val,
        batch: config.batch_size,
        seed: rng::derive(config.seed, "baseline-init", &[]),
    };
    let state = fit_over_learning_rates(&erm, config, config.learning_rates_for(Stage::Baseline), config.epochs_baseline, "baseline")?;
    let params = state.best_params[0].clone();
    Ok((TrainedClassifier { net, params }, state.log.records))
}
