//! Accuracy evaluation and the leave-one-domain-out protocol.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_loo_splits, MultiDomainDataset, ProtocolFold, Sample, Split};
use crate::error::{Error, Result};
use crate::nets::{InvariantModel, Predictor, TrainedClassifier};
use crate::training::{
    self, select_lambdas, train_bank, train_domain_invariant, train_erm_baseline, EpochRecord, InvariantMetrics,
    LambdaSelection, SampleAudit, Sources, SpecificClassifierBank, TrainConfig,
};
use crate::par;

/// Top-1 accuracy of `model` on `samples`.
pub fn accuracy<P: Predictor + ?Sized>(model: &P, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("cannot evaluate on an empty split".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.label >= model.num_classes()) {
        return Err(Error::Precondition(format!(
            "class-count mismatch: model has {} classes, sample {} has label {}",
            model.num_classes(),
            bad.uid,
            bad.label
        )));
    }
    let hits = par::map(samples, |s| model.predict(&s.image).map(|p| p == s.label))
        .into_iter()
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Accuracy on one split of one domain.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, dataset: &MultiDomainDataset, domain: usize, split: Split) -> Result<f64> {
    if model.num_classes() != dataset.num_classes {
        return Err(Error::Precondition(format!(
            "class-count mismatch: model has {}, dataset has {}",
            model.num_classes(),
            dataset.num_classes
        )));
    }
    accuracy(model, &dataset.domains[domain].split_samples(split))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    Lrdg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Lrdg => "lrdg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "lrdg" => Ok(Method::Lrdg),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Which target samples are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetEval {
    /// The target domain's test split.
    #[default]
    TestSplit,
    /// Every sample of the target domain.
    FullDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRecord {
    pub target: String,
    pub method: Method,
    pub accuracy: f64,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAverage {
    pub method: Method,
    /// Mean over targets, then over seeds.
    pub mean: f64,
    /// Standard deviation of the per-seed averages (0 for a single seed).
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub records: Vec<ProtocolRecord>,
}

const CSV_HEADER: [&str; 5] = ["target", "method", "accuracy", "seed", "config_digest"];

impl ProtocolResult {
    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.records.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn averages(&self) -> Vec<MethodAverage> {
        self.methods()
            .into_iter()
            .map(|method| {
                let mut seeds: Vec<u64> = self.records.iter().filter(|r| r.method == method).map(|r| r.seed).collect();
                seeds.sort();
                seeds.dedup();
                let per_seed: Vec<f64> = seeds
                    .iter()
                    .map(|&seed| {
                        let accs: Vec<f64> = self
                            .records
                            .iter()
                            .filter(|r| r.method == method && r.seed == seed)
                            .map(|r| r.accuracy)
                            .collect();
                        accs.iter().sum::<f64>() / accs.len() as f64
                    })
                    .collect();
                let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
                let std = if per_seed.len() > 1 {
                    (per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (per_seed.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                MethodAverage {
                    method,
                    mean,
                    std,
                    seeds: per_seed.len(),
                }
            })
            .collect()
    }

    pub fn average(&self, method: Method) -> Option<f64> {
        self.averages().into_iter().find(|a| a.method == method).map(|a| a.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.target.clone(),
                r.method.name().to_string(),
                r.accuracy.to_string(),
                r.seed.to_string(),
                r.config_digest.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: String| Error::Data(format!("bad results table: {e}"));
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            records.push(ProtocolRecord {
                target: row[0].to_string(),
                method: row[1].parse()?,
                accuracy: row[2].parse().map_err(|e| bad(format!("{e}")))?,
                seed: row[3].parse().map_err(|e| bad(format!("{e}")))?,
                config_digest: row[4].to_string(),
            });
        }
        Ok(ProtocolResult { records })
    }

    /// Structured summary: the averages plus every record.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "averages": self.averages(),
            "records": self.records,
        }))
        .expect("summary serializes")
    }

    /// Human-readable table in the layout of a per-target results table.
    pub fn to_table(&self) -> String {
        let mut targets: Vec<String> = Vec::new();
        for r in &self.records {
            if !targets.contains(&r.target) {
                targets.push(r.target.clone());
            }
        }
        let mut out = format!("{:<10}", "method");
        for t in &targets {
            out.push_str(&format!("{t:>11}"));
        }
        out.push_str(&format!("{:>11}\n", "Avg."));
        for avg in self.averages() {
            out.push_str(&format!("{:<10}", avg.method.name()));
            for t in &targets {
                let accs: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| &r.target == t && r.method == avg.method)
                    .map(|r| r.accuracy)
                    .collect();
                let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
                out.push_str(&format!("{:>11.2}", 100.0 * mean));
            }
            out.push_str(&format!("{:>11.2}\n", 100.0 * avg.mean));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("results.csv");
        fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("results_summary.json");
        fs::write(&json_path, self.summary_json()).map_err(|e| Error::io(&json_path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub methods: Vec<Method>,
    /// Restrict to these target domain indices; empty means every domain.
    #[serde(default)]
    pub targets: Vec<usize>,
    #[serde(default)]
    pub target_eval: TargetEval,
    /// Run leave-one-source-out lambda selection when either grid has more
    /// than one value; otherwise `config.weights` is used as given.
    #[serde(default)]
    pub select_lambdas: bool,
}

/// Trained artifacts of one leave-one-domain-out fold.
pub struct FoldOutcome {
    pub fold: ProtocolFold,
    pub bank: Option<SpecificClassifierBank>,
    pub invariant: Option<InvariantModel>,
    pub invariant_metrics: Option<InvariantMetrics>,
    pub baseline: Option<TrainedClassifier>,
    pub lambdas: Option<LambdaSelection>,
    /// Epoch logs keyed by run name.
    pub logs: Vec<(String, Vec<EpochRecord>)>,
    pub accuracies: Vec<(Method, f64)>,
    /// Source samples recorded by the audit; target samples are never among them.
    pub audited_samples: usize,
}

pub struct ProtocolOutcome {
    pub result: ProtocolResult,
    pub folds: Vec<FoldOutcome>,
}

fn target_samples(dataset: &MultiDomainDataset, target: usize, mode: TargetEval) -> Vec<&Sample> {
    let domain = &dataset.domains[target];
    match mode {
        TargetEval::TestSplit => domain.split_samples(Split::Test),
        TargetEval::FullDomain => domain.samples.iter().collect(),
    }
}

/// Trains the requested methods on one fold's sources and scores them on
/// the target. Every sample that enters training or selection is audited.
pub fn run_fold(dataset: &MultiDomainDataset, fold: &ProtocolFold, options: &ProtocolOptions, config: &TrainConfig) -> Result<FoldOutcome> {
    let audit = SampleAudit::new();
    let sources = Sources::new(dataset, &fold.sources)?.with_audit(&audit);
    let target_name = &dataset.domains[fold.target].name;
    let mut outcome = FoldOutcome {
        fold: fold.clone(),
        bank: None,
        invariant: None,
        invariant_metrics: None,
        baseline: None,
        lambdas: None,
        logs: Vec::new(),
        accuracies: Vec::new(),
        audited_samples: 0,
    };
    let eval_samples = target_samples(dataset, fold.target, options.target_eval);
    if options.methods.contains(&Method::Lrdg) {
        let mut cfg = config.clone();
        if options.select_lambdas && (config.lambda2_grid.len() > 1 || config.lambda3_grid.len() > 1) {
            let sel = select_lambdas(&sources, config)?;
            cfg.weights.lambda2 = sel.lambda2;
            cfg.weights.lambda3 = sel.lambda3;
            outcome.lambdas = Some(sel);
        }
        let (bank, logs) = train_bank(&sources, &cfg)?;
        for (d, log) in fold.sources.iter().zip(logs) {
            outcome.logs.push((format!("specific-{}", dataset.domains[*d].name), log));
        }
        let bank = training::freeze(bank);
        let stage2 = train_domain_invariant(&bank, &sources, &cfg)?;
        bank.verify()?;
        outcome.logs.push(("invariant".into(), stage2.log));
        let acc = accuracy(&stage2.model, &eval_samples)?;
        log::info!("target {target_name}: lrdg {acc:.3}");
        outcome.accuracies.push((Method::Lrdg, acc));
        outcome.invariant = Some(stage2.model);
        outcome.invariant_metrics = Some(stage2.metrics);
        outcome.bank = Some(bank);
    }
    if options.methods.contains(&Method::Baseline) {
        let (model, log) = train_erm_baseline(&sources, config)?;
        outcome.logs.push(("baseline".into(), log));
        let acc = accuracy(&model, &eval_samples)?;
        log::info!("target {target_name}: baseline {acc:.3}");
        outcome.accuracies.push((Method::Baseline, acc));
        outcome.baseline = Some(model);
    }
    let leaked = audit.touched(dataset, fold.target);
    if leaked > 0 {
        return Err(Error::Precondition(format!(
            "{leaked} samples of target domain {target_name} entered training"
        )));
    }
    outcome.audited_samples = audit.len();
    Ok(outcome)
}

pub fn run_protocol(dataset: &MultiDomainDataset, options: &ProtocolOptions, config: &TrainConfig, config_digest: &str) -> Result<ProtocolOutcome> {
    if options.methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let mut folds = make_loo_splits(dataset)?;
    if !options.targets.is_empty() {
        folds.retain(|f| options.targets.contains(&f.target));
    }
    if options.methods.contains(&Method::Lrdg) && options.select_lambdas && dataset.num_domains() < 4 {
        return Err(Error::Precondition(
            "lambda selection needs at least 3 source domains per fold (4 domains in total)".into(),
        ));
    }
    let outcomes = par::map(&folds, |fold| run_fold(dataset, fold, options, config));
    let mut result = ProtocolResult::default();
    let mut done = Vec::new();
    for o in outcomes {
        let o = o?;
        for &(method, accuracy) in &o.accuracies {
            result.records.push(ProtocolRecord {
                target: dataset.domains[o.fold.target].name.clone(),
                method,
                accuracy,
                seed: config.seed,
                config_digest: config_digest.to_string(),
            });
        }
        done.push(o);
    }
    Ok(ProtocolOutcome { result, folds: done })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::nets::FeatureLayer;

    /// Predicts a fixed function of the first pixel.
    struct Oracle {
        classes: usize,
        perfect: bool,
    }

    impl Predictor for Oracle {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn logits(&self, image: &[f64]) -> Result<Vec<f64>> {
            let label = (image[0] * 10.0).round() as usize;
            let pick = if self.perfect { label } else { (label * 7 + 3) % self.classes };
            Ok((0..self.classes).map(|c| if c == pick { 1.0 } else { 0.0 }).collect())
        }

        fn extract_features(&self, _: &[&[f64]], _: FeatureLayer) -> Result<Vec<Vec<f64>>> {
            unimplemented!()
        }
    }

    fn samples(labels: &[usize]) -> Vec<Sample> {
        let shape = ImageShape::new(1, 1, 1);
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Sample {
                image: vec![l as f64 / 10.0; shape.len()],
                label: l,
                domain_id: 0,
                uid: i as u64,
                cue: None,
            })
            .collect()
    }

    #[test]
    fn accuracy_matches_counting() {
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let s = samples(&labels);
        let refs: Vec<&Sample> = s.iter().collect();
        assert_eq!(accuracy(&Oracle { classes: 5, perfect: true }, &refs).unwrap(), 1.0);
        let wrong = Oracle { classes: 5, perfect: false };
        let count = refs.iter().filter(|x| wrong.predict(&x.image).unwrap() == x.label).count();
        assert_eq!(accuracy(&wrong, &refs).unwrap(), count as f64 / 10.0);
        assert!(accuracy(&Oracle { classes: 3, perfect: true }, &refs).is_err());
        assert!(accuracy(&wrong, &[]).is_err());
    }

    #[test]
    fn results_roundtrip_and_average() {
        let mk = |t: &str, m, a| ProtocolRecord {
            target: t.into(),
            method: m,
            accuracy: a,
            seed: 3,
            config_digest: "d1".into(),
        };
        let r = ProtocolResult {
            records: vec![
                mk("a,b", Method::Lrdg, 0.7),
                mk("c", Method::Lrdg, 0.9),
                mk("a,b", Method::Baseline, 0.1 + 0.2),
                mk("c", Method::Baseline, 0.5),
            ],
        };
        let back = ProtocolResult::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert!((r.average(Method::Lrdg).unwrap() - 0.8).abs() < 1e-12);
        assert!(r.to_table().contains("Avg."));
    }
}
