//! Stage two: the mapper and the domain-invariant classifier are trained
//! jointly while the frozen domain-specific classifiers only pass gradients
//! back to the mapper.

use serde::{Deserialize, Serialize};

use super::engine::{balanced_batches, fit_over_learning_rates, EpochRecord, Objective, Validation};
use super::specific::{SpecificClassifierBank, CHUNK};
use super::{Sources, Stage, TrainConfig};
use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights, ReconstructionKind, Stage2Sample, UncertaintyVariant};
use crate::nets::{Classifier, InvariantModel, Mapper};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantMetrics {
    /// Accuracy of classifier∘mapper on pooled source validation samples.
    pub val_accuracy: f64,
    /// Mean entropy of each frozen classifier on its own domain's mapped
    /// validation images.
    pub specific_entropy: f64,
    pub val_reconstruction: f64,
    pub learning_rate: f64,
    pub best_epoch: usize,
}

pub struct InvariantOutcome {
    pub model: InvariantModel,
    pub metrics: InvariantMetrics,
    pub log: Vec<EpochRecord>,
}

struct Stage2<'a> {
    mapper: &'a Mapper,
    classifier: &'a Classifier,
    bank: &'a SpecificClassifierBank,
    /// Train samples per bank position.
    train: Vec<Vec<&'a Sample>>,
    val: Vec<Vec<&'a Sample>>,
    weights: LossWeights,
    variant: UncertaintyVariant,
    reconstruction: ReconstructionKind,
    batch: usize,
    seed: u64,
}

/// Gradient contributions of one sample.
struct SampleGrad {
    mapper: Vec<f64>,
    classifier: Vec<f64>,
    terms: LossTerms,
}

impl Stage2<'_> {
    fn sample_grad(&self, params: &[Vec<f64>], sample: &Sample, position: usize, scale: f64) -> Result<SampleGrad> {
        let (mp, cp) = (&params[0], &params[1]);
        let mut mapper = vec![0.0; self.mapper.num_params()];
        let mut classifier = vec![0.0; self.classifier.num_params()];
        let mtrace = self.mapper.forward(mp, &sample.image)?;
        let z = &mtrace.output;

        // Classification through the mapper updates both networks.
        let ctrace = self.classifier.forward(cp, z)?;
        let (ce, dlogits) = losses::cross_entropy_grad(&ctrace.logits, sample.label)?;
        let dlogits: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
        let mut dz = self
            .classifier
            .backward(cp, &ctrace, &dlogits, Some(&mut classifier), true)
            .expect("input gradient requested");

        // Uncertainty of the frozen classifier: gradient w.r.t. its input only.
        let frozen = self.bank.params(position);
        let strace = self.bank.net().forward(frozen, z)?;
        let (unc, dspec) = losses::uncertainty_loss_grad(&strace.logits, self.variant);
        if self.weights.lambda2 > 0.0 {
            let dspec: Vec<f64> = dspec.iter().map(|d| d * scale * self.weights.lambda2).collect();
            let dz_spec = self
                .bank
                .net()
                .backward(frozen, &strace, &dspec, None, true)
                .expect("input gradient requested");
            dz.iter_mut().zip(&dz_spec).for_each(|(a, b)| *a += b);
        }

        // Reconstruction acts on the mapper only.
        let (rec, drec) = losses::reconstruction_loss_grad(z, &sample.image, self.reconstruction)?;
        if self.weights.lambda3 > 0.0 {
            dz.iter_mut()
                .zip(&drec)
                .for_each(|(a, b)| *a += b * scale * self.weights.lambda3);
        }
        self.mapper.backward(mp, &mtrace, &dz, Some(&mut mapper), false);
        Ok(SampleGrad {
            mapper,
            classifier,
            terms: LossTerms {
                classification: ce * scale,
                uncertainty: unc * scale,
                reconstruction: rec * scale,
                total: 0.0,
            },
        })
    }
}

impl Objective for Stage2<'_> {
    type Step = Vec<Vec<usize>>;

    fn init(&self) -> Vec<Vec<f64>> {
        vec![
            self.mapper.init_params(rng::derive(self.seed, "mapper-init", &[])),
            self.classifier.init_params(rng::derive(self.seed, "invariant-init", &[])),
        ]
    }

    fn plan_epoch(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
        let lens: Vec<usize> = self.train.iter().map(Vec::len).collect();
        let mean = lens.iter().sum::<usize>() / lens.len();
        balanced_batches(&lens, mean.div_ceil(self.batch), self.batch, rng)
    }

    fn gradient(&self, params: &[Vec<f64>], step: &Vec<Vec<usize>>) -> Result<(Vec<Vec<f64>>, LossTerms)> {
        let jobs: Vec<(&Sample, usize)> = step
            .iter()
            .enumerate()
            .flat_map(|(pos, idx)| idx.iter().map(move |&i| (self.train[pos][i], pos)))
            .collect();
        let scale = 1.0 / jobs.len() as f64;
        let chunks: Vec<&[(&Sample, usize)]> = jobs.chunks(CHUNK).collect();
        let parts = par::map(&chunks, |chunk| -> Result<SampleGrad> {
            let mut acc: Option<SampleGrad> = None;
            for &(sample, pos) in chunk.iter() {
                let g = self.sample_grad(params, sample, pos, scale)?;
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        par::accumulate(&mut a.mapper, std::slice::from_ref(&g.mapper));
                        par::accumulate(&mut a.classifier, std::slice::from_ref(&g.classifier));
                        a.terms.classification += g.terms.classification;
                        a.terms.uncertainty += g.terms.uncertainty;
                        a.terms.reconstruction += g.terms.reconstruction;
                        a
                    }
                });
            }
            Ok(acc.expect("chunks are nonempty"))
        });
        let mut gm = vec![0.0; self.mapper.num_params()];
        let mut gc = vec![0.0; self.classifier.num_params()];
        let mut terms = LossTerms::default();
        for part in parts {
            let part = part?;
            par::accumulate(&mut gm, std::slice::from_ref(&part.mapper));
            par::accumulate(&mut gc, std::slice::from_ref(&part.classifier));
            terms.classification += part.terms.classification;
            terms.uncertainty += part.terms.uncertainty;
            terms.reconstruction += part.terms.reconstruction;
        }
        terms.total = terms.classification + self.weights.lambda2 * terms.uncertainty + self.weights.lambda3 * terms.reconstruction;
        Ok((vec![gm, gc], terms))
    }

    fn validate(&self, params: &[Vec<f64>]) -> Result<Validation> {
        let terms = self.evaluate(params)?;
        Ok(Validation {
            accuracy: terms.0,
            objective: terms.1.total,
        })
    }
}

impl Stage2<'_> {
    /// Validation accuracy of the pipeline and the stage-2 objective on the
    /// pooled validation samples.
    fn evaluate(&self, params: &[Vec<f64>]) -> Result<(f64, LossTerms)> {
        let jobs: Vec<(&Sample, usize)> = self
            .val
            .iter()
            .enumerate()
            .flat_map(|(pos, s)| s.iter().map(move |&x| (x, pos)))
            .collect();
        let outputs = par::map(&jobs, |&(sample, pos)| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let z = self.mapper.map(&params[0], &sample.image)?;
            let inv = self.classifier.logits(&params[1], &z)?;
            let spec = self.bank.net().logits(self.bank.params(pos), &z)?;
            Ok((z, inv, spec))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let batch: Vec<Stage2Sample> = jobs
            .iter()
            .zip(&outputs)
            .map(|(&(sample, _), (z, inv, spec))| Stage2Sample {
                invariant_logits: inv,
                label: sample.label,
                specific_logits: Some(spec),
                mapped: z,
                original: &sample.image,
            })
            .collect();
        let terms = losses::stage2_loss(&batch, &self.weights, self.variant, self.reconstruction)?;
        let correct = batch
            .iter()
            .filter(|s| losses::argmax(s.invariant_logits) == s.label)
            .count();
        Ok((correct as f64 / batch.len() as f64, terms))
    }
}

/// Trains mapper and domain-invariant classifier against a frozen bank whose
/// positions align with `sources.domains`.
pub fn train_domain_invariant(bank: &SpecificClassifierBank, sources: &Sources<'_>, config: &TrainConfig) -> Result<InvariantOutcome> {
    config.validate()?;
    if !bank.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if bank.domains() != sources.domains {
        return Err(Error::Precondition(format!(
            "bank domains {:?} are not index-aligned with sources {:?}",
            bank.domains(),
            sources.domains
        )));
    }
    let mapper = config.mapper(sources.dataset)?;
    let classifier = config.classifier(sources.dataset)?;
    let split = |s: Split| -> Result<Vec<Vec<&Sample>>> {
        sources
            .domains
            .iter()
            .map(|&d| {
                let v = sources.split(d, s);
                if v.is_empty() {
                    Err(Error::Precondition(format!(
                        "domain {} has an empty {s:?} split",
                        sources.dataset.domains[d].name
                    )))
                } else {
                    Ok(v)
                }
            })
            .collect()
    };
    let stage = Stage2 {
        mapper: &mapper,
        classifier: &classifier,
        bank,
        train: split(Split::Train)?,
        val: split(Split::Val)?,
        weights: config.weights,
        variant: config.uncertainty,
        reconstruction: config.reconstruction,
        batch: config.batch_size,
        seed: config.seed,
    };
    let state = fit_over_learning_rates(&stage, config, config.learning_rates_for(Stage::Invariant), config.epochs_stage2, "invariant")?;
    let params = state.best_params.clone();
    let (val_accuracy, terms) = stage.evaluate(&params)?;
    let metrics = InvariantMetrics {
        val_accuracy,
        specific_entropy: -terms.uncertainty,
        val_reconstruction: terms.reconstruction,
        learning_rate: state.learning_rate,
        best_epoch: state.best_epoch.unwrap_or(0),
    };
    let mut params = params.into_iter();
    let model = InvariantModel {
        mapper,
        mapper_params: params.next().expect("mapper group"),
        classifier,
        classifier_params: params.next().expect("classifier group"),
    };
    Ok(InvariantOutcome {
        model,
        metrics,
        log: state.log.records,
    })
}

/// Gradients of one stage-2 step, exposed for routing checks.
pub fn stage2_step_gradients(
    bank: &SpecificClassifierBank,
    model: &InvariantModel,
    samples: &[(&Sample, usize)],
    config: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>, LossTerms)> {
    let stage = Stage2 {
        mapper: &model.mapper,
        classifier: &model.classifier,
        bank,
        train: Vec::new(),
        val: Vec::new(),
        weights: config.weights,
        variant: config.uncertainty,
        reconstruction: config.reconstruction,
        batch: config.batch_size,
        seed: config.seed,
    };
    let params = vec![model.mapper_params.clone(), model.classifier_params.clone()];
    let scale = 1.0 / samples.len() as f64;
    let mut gm = vec![0.0; model.mapper.num_params()];
    let mut gc = vec![0.0; model.classifier.num_params()];
    let mut terms = LossTerms::default();
    for &(s, pos) in samples {
        let g = stage.sample_grad(&params, s, pos, scale)?;
        par::accumulate(&mut gm, &[g.mapper]);
        par::accumulate(&mut gc, &[g.classifier]);
        terms.classification += g.terms.classification;
        terms.uncertainty += g.terms.uncertainty;
        terms.reconstruction += g.terms.reconstruction;
    }
    terms.total = terms.classification + config.weights.lambda2 * terms.uncertainty + config.weights.lambda3 * terms.reconstruction;
    Ok((gm, gc, terms))
}
