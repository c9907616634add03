//! Proxy A-distance between feature distributions, pairwise and
//! closest-mixture source divergences, and the risk-bound report.

mod mixture;
mod report;
mod svm;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{MultiDomainDataset, ProtocolFold, Sample, Split};
use crate::error::{Error, Result};
use crate::nets::{FeatureLayer, Predictor};
use crate::{par, rng};

pub use mixture::{enumerate_mixtures, sample_mixture, MixtureSpec};
pub use report::{bound_report, write_pad_report, write_pad_scatter, BoundReport, PadKind, PadRecord};
pub use svm::{train_linear_svm, LinearSvm, Standardizer, SVM_EPOCHS};

pub const DEFAULT_REG_GRID: [f64; 6] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadResult {
    pub label: String,
    /// Lowest held-out domain-classification error over the grid.
    pub epsilon: f64,
    pub pad: f64,
    /// Regularization value that achieved `epsilon` (smallest on ties).
    pub reg: f64,
    pub seed: u64,
}

/// `2 (1 - 2 eps)`, clamped at zero for worse-than-chance errors.
pub fn pad_from_error(epsilon: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * epsilon)).max(0.0)
}

fn split_half<'a>(set: &'a [Vec<f64>], seed: u64, side: u64) -> (Vec<&'a Vec<f64>>, Vec<&'a Vec<f64>>) {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng::stream(seed, "pad-split", &[side]));
    let half = set.len() / 2;
    let train = order[..half].iter().map(|&i| &set[i]).collect();
    let test = order[half..].iter().map(|&i| &set[i]).collect();
    (train, test)
}

/// Proxy A-distance between feature sets `a` (label 1) and `b` (label 0).
///
/// Each set is split in half at random; one linear SVM per grid value is fit
/// on the standardized train halves and scored on the test halves.
pub fn pad(a: &[Vec<f64>], b: &[Vec<f64>], reg_grid: &[f64], seed: u64, label: &str) -> Result<PadResult> {
    if reg_grid.is_empty() {
        return Err(Error::Config("pad regularization grid is empty".into()));
    }
    if a.len() < 4 || b.len() < 4 {
        return Err(Error::Precondition(format!(
            "pad `{label}` needs at least 4 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (a_train, a_test) = split_half(a, seed, 0);
    let (b_train, b_test) = split_half(b, seed, 1);
    let train_raw: Vec<&Vec<f64>> = a_train.iter().chain(&b_train).copied().collect();
    let owned: Vec<Vec<f64>> = train_raw.iter().map(|v| v.to_vec()).collect();
    let standardizer = Standardizer::fit(&owned);
    let train: Vec<Vec<f64>> = owned.iter().map(|v| standardizer.apply(v)).collect();
    let train_y: Vec<bool> = (0..train.len()).map(|i| i < a_train.len()).collect();
    let test: Vec<Vec<f64>> = a_test.iter().chain(&b_test).map(|v| standardizer.apply(v)).collect();
    let test_y: Vec<bool> = (0..test.len()).map(|i| i < a_test.len()).collect();
    let errors = par::map(reg_grid, |&reg| {
        train_linear_svm(&train, &train_y, reg, rng::derive(seed, "pad-svm", &[reg.to_bits()])).map(|svm| svm.error(&test, &test_y))
    });
    let mut best: Option<(f64, f64)> = None;
    for (&reg, err) in reg_grid.iter().zip(errors) {
        let err = err?;
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, reg));
        }
    }
    let (epsilon, reg) = best.expect("grid is nonempty");
    Ok(PadResult {
        label: label.to_string(),
        epsilon,
        pad: pad_from_error(epsilon),
        reg,
        seed,
    })
}

/// A named collection of samples, e.g. one source domain.
pub struct NamedSamples<'a> {
    pub name: String,
    pub samples: Vec<&'a Sample>,
}

pub fn features_of<P: Predictor + ?Sized>(model: &P, samples: &[&Sample], layer: FeatureLayer) -> Result<Vec<Vec<f64>>> {
    let images: Vec<&[f64]> = samples.iter().map(|s| s.image.as_slice()).collect();
    model.extract_features(&images, layer)
}

/// One PAD per unordered pair of named feature sets, in index order.
pub fn pairwise_pads(sets: &[(String, Vec<Vec<f64>>)], reg_grid: &[f64], seed: u64) -> Result<Vec<PadResult>> {
    if sets.len() < 2 {
        return Err(Error::Precondition("pairwise pads need at least 2 domains".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..sets.len()).flat_map(|i| (i + 1..sets.len()).map(move |j| (i, j))).collect();
    par::map(&pairs, |&(i, j)| {
        let label = format!("{}|{}", sets[i].0, sets[j].0);
        pad(&sets[i].1, &sets[j].1, reg_grid, seed, &label)
    })
    .into_iter()
    .collect()
}

/// Pairwise PADs between sources in the feature space of `model`.
pub fn pairwise_source_pads<P: Predictor + ?Sized>(
    model: &P,
    layer: FeatureLayer,
    sources: &[NamedSamples<'_>],
    reg_grid: &[f64],
    seed: u64,
) -> Result<Vec<PadResult>> {
    let sets = sources
        .iter()
        .map(|s| Ok((s.name.clone(), features_of(model, &s.samples, layer)?)))
        .collect::<Result<Vec<_>>>()?;
    pairwise_pads(&sets, reg_grid, seed)
}

/// Searches every tenth-grid mixture of `sources` for the one with the
/// lowest PAD to `target`. Each mixture draws as many samples as the target
/// has; ties go to the lexicographically smallest mixture.
pub fn closest_mixture_features(
    sources: &[Vec<Vec<f64>>],
    target: &[Vec<f64>],
    reg_grid: &[f64],
    seed: u64,
) -> Result<(MixtureSpec, PadResult)> {
    if sources.is_empty() || target.is_empty() {
        return Err(Error::Precondition("closest mixture needs sources and a nonempty target".into()));
    }
    let specs = enumerate_mixtures(sources.len(), 1)?;
    let refs: Vec<&[Vec<f64>]> = sources.iter().map(Vec::as_slice).collect();
    let results = par::map(&specs, |spec| {
        let mixed = sample_mixture(spec, &refs, target.len(), seed)?;
        pad(&mixed, target, reg_grid, seed, &format!("mixture{spec}|target"))
    });
    let mut best: Option<(MixtureSpec, PadResult)> = None;
    for (spec, r) in specs.into_iter().zip(results) {
        let r = r?;
        if best.as_ref().is_none_or(|(_, b)| r.pad < b.pad) {
            best = Some((spec, r));
        }
    }
    Ok(best.expect("at least one mixture"))
}

pub fn closest_mixture<P: Predictor + ?Sized>(
    model: &P,
    layer: FeatureLayer,
    sources: &[NamedSamples<'_>],
    target: &[&Sample],
    reg_grid: &[f64],
    seed: u64,
) -> Result<(MixtureSpec, PadResult)> {
    let feats = sources
        .iter()
        .map(|s| features_of(model, &s.samples, layer))
        .collect::<Result<Vec<_>>>()?;
    closest_mixture_features(&feats, &features_of(model, target, layer)?, reg_grid, seed)
}

/// Divergence measurements for one model on one leave-one-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDivergence {
    pub pairwise: Vec<PadResult>,
    pub mixture: MixtureSpec,
    pub closest: PadResult,
    pub bound: BoundReport,
}

/// Pairwise source PADs, the closest source mixture to the target and the
/// bound report, all in the feature space of `model`. Every sample of each
/// domain is used; source risks come from the source validation splits.
pub fn analyze_model<P: Predictor + ?Sized>(
    model: &P,
    dataset: &MultiDomainDataset,
    fold: &ProtocolFold,
    reg_grid: &[f64],
    seed: u64,
) -> Result<ModelDivergence> {
    let layer = FeatureLayer::Penultimate;
    let all = |d: usize| -> Vec<&Sample> { dataset.domains[d].samples.iter().collect() };
    let source_feats = fold
        .sources
        .iter()
        .map(|&d| features_of(model, &all(d), layer))
        .collect::<Result<Vec<_>>>()?;
    let target_feats = features_of(model, &all(fold.target), layer)?;
    let named: Vec<(String, Vec<Vec<f64>>)> = fold
        .sources
        .iter()
        .zip(&source_feats)
        .map(|(&d, f)| (dataset.domains[d].name.clone(), f.clone()))
        .collect();
    let pairwise = if named.len() >= 2 { pairwise_pads(&named, reg_grid, seed)? } else { Vec::new() };
    let (mixture, mut closest) = closest_mixture_features(&source_feats, &target_feats, reg_grid, seed)?;
    closest.label = format!("mixture{mixture}|{}", dataset.domains[fold.target].name);
    let risks = fold
        .sources
        .iter()
        .map(|&d| Ok(1.0 - crate::evaluation::accuracy(model, &dataset.domains[d].split_samples(Split::Val))?))
        .collect::<Result<Vec<f64>>>()?;
    let bound = bound_report(&pairwise, &closest, &mixture, &risks)?;
    Ok(ModelDivergence {
        pairwise,
        mixture,
        closest,
        bound,
    })
}
