//! Stage one: one classifier per source domain, accurate on its own domain
//! and maximally uncertain on every other source domain.

use serde::{Deserialize, Serialize};

use super::engine::{balanced_batches, fit_over_learning_rates, EpochRecord, Objective, Validation};
use super::{Sources, Stage, TrainConfig};
use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights, UncertaintyVariant};
use crate::nets::{param_checksum, Classifier};
use crate::{par, rng};

/// Samples processed per gradient chunk; fixed so reductions do not depend
/// on the thread count.
pub(crate) const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecificMetrics {
    pub own_val_accuracy: f64,
    pub other_val_accuracy: f64,
    pub other_mean_entropy: f64,
    pub learning_rate: f64,
    pub best_epoch: usize,
}

pub struct SpecificOutcome {
    pub params: Vec<f64>,
    pub metrics: SpecificMetrics,
    pub log: Vec<EpochRecord>,
}

/// One per-sample term of a stage objective.
pub(crate) enum Term<'a> {
    Classify { sample: &'a Sample, weight: f64 },
    Uncertain { sample: &'a Sample, weight: f64 },
}

/// Sums the weighted per-sample loss gradients of `terms` for one classifier.
pub(crate) fn classifier_gradient(
    net: &Classifier,
    params: &[f64],
    terms: &[Term<'_>],
    variant: UncertaintyVariant,
) -> Result<(Vec<f64>, f64, f64)> {
    let chunks: Vec<&[Term]> = terms.chunks(CHUNK).collect();
    let parts = par::map(&chunks, |chunk| -> Result<(Vec<f64>, f64, f64)> {
        let mut grad = vec![0.0; net.num_params()];
        let (mut ce, mut unc) = (0.0, 0.0);
        for term in chunk.iter() {
            let (sample, weight) = match term {
                Term::Classify { sample, weight } | Term::Uncertain { sample, weight } => (*sample, *weight),
            };
            let trace = net.forward(params, &sample.image)?;
            let (loss, dlogits) = match term {
                Term::Classify { .. } => losses::cross_entropy_grad(&trace.logits, sample.label)?,
                Term::Uncertain { .. } => losses::uncertainty_loss_grad(&trace.logits, variant),
            };
            match term {
                Term::Classify { .. } => ce += weight * loss,
                Term::Uncertain { .. } => unc += weight * loss,
            }
            let scaled: Vec<f64> = dlogits.iter().map(|d| d * weight).collect();
            net.backward(params, &trace, &scaled, Some(&mut grad), false);
        }
        Ok((grad, ce, unc))
    });
    let mut grad = vec![0.0; net.num_params()];
    let (mut ce, mut unc) = (0.0, 0.0);
    for part in parts {
        let (g, c, u) = part?;
        par::accumulate(&mut grad, std::slice::from_ref(&g));
        ce += c;
        unc += u;
    }
    Ok((grad, ce, unc))
}

pub(crate) fn accuracy_of(net: &Classifier, params: &[f64], samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct = par::map(samples, |s| net.predict(params, &s.image).map(|p| p == s.label))
        .into_iter()
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

struct Stage1<'a> {
    net: &'a Classifier,
    own: Vec<&'a Sample>,
    others: Vec<Vec<&'a Sample>>,
    own_val: Vec<&'a Sample>,
    others_val: Vec<Vec<&'a Sample>>,
    weights: LossWeights,
    variant: UncertaintyVariant,
    batch: usize,
    seed: u64,
}

impl Stage1<'_> {
    fn use_uncertainty(&self) -> bool {
        !self.others.is_empty()
    }

    fn terms<'s>(&self, own: &[&'s Sample], others: &[Vec<&'s Sample>]) -> Vec<Term<'s>> {
        let mut terms: Vec<Term> = own
            .iter()
            .map(|s| Term::Classify {
                sample: s,
                weight: 1.0 / own.len() as f64,
            })
            .collect();
        if self.use_uncertainty() {
            let pooled: usize = others.iter().map(Vec::len).sum();
            for s in others.iter().flatten() {
                terms.push(Term::Uncertain {
                    sample: s,
                    weight: self.weights.lambda1 / pooled as f64,
                });
            }
        }
        terms
    }
}

impl Objective for Stage1<'_> {
    type Step = Vec<Vec<usize>>;

    fn init(&self) -> Vec<Vec<f64>> {
        vec![self.net.init_params(self.seed)]
    }

    fn plan_epoch(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
        let mut lens = vec![self.own.len()];
        lens.extend(self.others.iter().map(Vec::len));
        let steps = self.own.len().div_ceil(self.batch);
        balanced_batches(&lens, steps, self.batch, rng)
    }

    fn gradient(&self, params: &[Vec<f64>], step: &Vec<Vec<usize>>) -> Result<(Vec<Vec<f64>>, LossTerms)> {
        let own: Vec<&Sample> = step[0].iter().map(|&i| self.own[i]).collect();
        let others: Vec<Vec<&Sample>> = self
            .others
            .iter()
            .zip(&step[1..])
            .map(|(pool, idx)| idx.iter().map(|&i| pool[i]).collect())
            .collect();
        let terms = self.terms(&own, &others);
        let (grad, ce, unc) = classifier_gradient(self.net, &params[0], &terms, self.variant)?;
        let uncertainty = if self.weights.lambda1 > 0.0 && self.use_uncertainty() {
            unc / self.weights.lambda1
        } else {
            0.0
        };
        Ok((
            vec![grad],
            LossTerms {
                classification: ce,
                uncertainty,
                reconstruction: 0.0,
                total: ce + unc,
            },
        ))
    }

    fn validate(&self, params: &[Vec<f64>]) -> Result<Validation> {
        let params = &params[0];
        let accuracy = accuracy_of(self.net, params, &self.own_val)?;
        let own_logits = self.net.logits_batch(params, &images(&self.own_val))?;
        let own: Vec<losses::Labeled> = own_logits
            .iter()
            .zip(&self.own_val)
            .map(|(l, s)| losses::Labeled {
                logits: l,
                label: s.label,
            })
            .collect();
        let objective = if self.use_uncertainty() {
            let others: Vec<Vec<Vec<f64>>> = self
                .others_val
                .iter()
                .map(|d| self.net.logits_batch(params, &images(d)))
                .collect::<Result<_>>()?;
            losses::stage1_loss(&own, &others, &self.weights, self.variant)?.total
        } else {
            own.iter().map(|s| losses::cross_entropy(s.logits, s.label)).sum::<Result<f64>>()? / own.len().max(1) as f64
        };
        Ok(Validation { accuracy, objective })
    }
}

pub(crate) fn images<'a>(samples: &[&'a Sample]) -> Vec<&'a [f64]> {
    samples.iter().map(|s| s.image.as_slice()).collect()
}

fn nonempty_split<'a>(sources: &Sources<'a>, domain: usize, split: Split) -> Result<Vec<&'a Sample>> {
    let samples = sources.split(domain, split);
    if samples.is_empty() {
        return Err(Error::Precondition(format!(
            "domain {} has an empty {split:?} split",
            sources.dataset.domains[domain].name
        )));
    }
    Ok(samples)
}

/// Trains the domain-specific classifier for source `domain` with the
/// configured `lambda1`, selecting the checkpoint with the best own-domain
/// validation accuracy (ties broken by the validation objective).
pub fn train_domain_specific(domain: usize, sources: &Sources<'_>, config: &TrainConfig) -> Result<SpecificOutcome> {
    config.validate()?;
    if !sources.domains.contains(&domain) {
        return Err(Error::Precondition(format!("domain {domain} is not among the sources")));
    }
    let others: Vec<usize> = sources.domains.iter().copied().filter(|&d| d != domain).collect();
    if others.is_empty() {
        log::warn!("single source domain: stage-1 uncertainty term skipped");
    }
    let net = config.classifier(sources.dataset)?;
    let stage = Stage1 {
        net: &net,
        own: nonempty_split(sources, domain, Split::Train)?,
        others: others.iter().map(|&d| nonempty_split(sources, d, Split::Train)).collect::<Result<_>>()?,
        own_val: nonempty_split(sources, domain, Split::Val)?,
        others_val: others.iter().map(|&d| nonempty_split(sources, d, Split::Val)).collect::<Result<_>>()?,
        weights: config.weights,
        variant: config.uncertainty,
        batch: config.batch_size,
        seed: rng::derive(config.seed, "specific-init", &[domain as u64]),
    };
    let run = format!("specific-{}", sources.dataset.domains[domain].name);
    let state = fit_over_learning_rates(&stage, config, config.learning_rates_for(Stage::Specific), config.epochs_stage1, &run)?;
    let params = state.best_params[0].clone();
    let metrics = specific_metrics(&stage, &params, state.learning_rate, state.best_epoch.unwrap_or(0))?;
    Ok(SpecificOutcome {
        params,
        metrics,
        log: state.log.records,
    })
}

fn specific_metrics(stage: &Stage1<'_>, params: &[f64], learning_rate: f64, best_epoch: usize) -> Result<SpecificMetrics> {
    let pooled: Vec<&Sample> = stage.others_val.iter().flatten().copied().collect();
    let (other_val_accuracy, other_mean_entropy) = if pooled.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let logits = stage.net.logits_batch(params, &images(&pooled))?;
        let correct = logits
            .iter()
            .zip(&pooled)
            .filter(|(l, s)| losses::argmax(l) == s.label)
            .count();
        let entropy = logits.iter().map(|l| losses::entropy(l)).sum::<f64>() / logits.len() as f64;
        (correct as f64 / pooled.len() as f64, entropy)
    };
    Ok(SpecificMetrics {
        own_val_accuracy: accuracy_of(stage.net, params, &stage.own_val)?,
        other_val_accuracy,
        other_mean_entropy,
        learning_rate,
        best_epoch,
    })
}

/// The frozen domain-specific classifiers, index-aligned with `domains`.
#[derive(Clone, Debug)]
pub struct SpecificClassifierBank {
    net: Classifier,
    domains: Vec<usize>,
    params: Vec<Vec<f64>>,
    metrics: Vec<SpecificMetrics>,
    frozen: bool,
    checksums: Vec<String>,
}

impl SpecificClassifierBank {
    pub fn new(net: Classifier, domains: Vec<usize>, params: Vec<Vec<f64>>, metrics: Vec<SpecificMetrics>) -> Result<Self> {
        if domains.len() != params.len() || params.iter().any(|p| p.len() != net.num_params()) {
            return Err(Error::Precondition("bank parameters do not match its domains or network".into()));
        }
        Ok(SpecificClassifierBank {
            net,
            domains,
            params,
            metrics,
            frozen: false,
            checksums: Vec::new(),
        })
    }

    pub fn net(&self) -> &Classifier {
        &self.net
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn params(&self, index: usize) -> &[f64] {
        &self.params[index]
    }

    pub fn metrics(&self) -> &[SpecificMetrics] {
        &self.metrics
    }

    /// Position of `domain` inside the bank.
    pub fn position(&self, domain: usize) -> Option<usize> {
        self.domains.iter().position(|&d| d == domain)
    }

    pub fn params_mut(&mut self, index: usize) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params[index])
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the bank immutable and records parameter checksums. Freezing a
    /// frozen bank does nothing.
    pub fn freeze(&mut self) {
        if self.frozen {
            return;
        }
        self.checksums = self.params.iter().map(|p| param_checksum(p)).collect();
        self.frozen = true;
    }

    pub fn checksums(&self) -> &[String] {
        &self.checksums
    }

    /// Recomputes every checksum and compares against those recorded at
    /// freeze time.
    pub fn verify(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        for (i, (p, c)) in self.params.iter().zip(&self.checksums).enumerate() {
            if &param_checksum(p) != c {
                return Err(Error::Checkpoint(format!("frozen classifier {i} changed after freezing")));
            }
        }
        Ok(())
    }
}

/// Consumes a trained bank and returns it frozen.
pub fn freeze(mut bank: SpecificClassifierBank) -> SpecificClassifierBank {
    bank.freeze();
    bank
}

/// Trains one domain-specific classifier per source domain. Runs are
/// independent and evaluated in parallel.
pub fn train_bank(sources: &Sources<'_>, config: &TrainConfig) -> Result<(SpecificClassifierBank, Vec<Vec<EpochRecord>>)> {
    let outcomes = par::map(sources.domains, |&d| train_domain_specific(d, sources, config));
    let mut params = Vec::new();
    let mut metrics = Vec::new();
    let mut logs = Vec::new();
    for o in outcomes {
        let o = o?;
        params.push(o.params);
        metrics.push(o.metrics);
        logs.push(o.log);
    }
    let bank = SpecificClassifierBank::new(config.classifier(sources.dataset)?, sources.domains.to_vec(), params, metrics)?;
    Ok((bank, logs))
}
