//! Experiment configuration (TOML), its digest, and the orchestration behind
//! the `lrdg` command-line tool.
//!
//! A run writes one directory per (config digest, seed):
//!
//! ```text
//! <output_dir>/<digest16>/seed-<seed>/
//!     config.toml                 effective configuration
//!     run.json                    digest, seed, domain names
//!     results.csv                 target,method,accuracy,seed,config_digest
//!     results_summary.json        averages plus every record
//!     checkpoints/<target>/       specific-<source>.ckpt, mapper.ckpt,
//!                                 invariant-classifier.ckpt, baseline.ckpt
//!     logs/<target>/<run>.jsonl   one record per epoch
//!     pad/                        pad_report.csv, pad_scatter.png, bounds.json
//! ```
//!
//! With several protocol seeds, `<output_dir>/<digest16>/results.csv` and
//! `results_summary.json` aggregate them (mean and std across seeds).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    export_dataset, generate_synthetic, load_image_folder, make_loo_splits, ExportManifest, MultiDomainDataset, Sample, SplitFractions,
    SyntheticDomainSpec,
};
use crate::divergence::{self, write_pad_report, write_pad_scatter, ModelDivergence, PadKind, PadRecord, DEFAULT_REG_GRID};
use crate::error::{Error, Result};
use crate::evaluation::{self, FoldOutcome, Method, ProtocolOptions, ProtocolResult, TargetEval};
use crate::nets::{Checkpoint, Classifier, InvariantModel, Mapper, NetworkSpec, Predictor, StageTag, TrainedClassifier};
use crate::training::{EpochRecord, TrainConfig};

fn default_image_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(flatten)]
        spec: SyntheticDomainSpec,
    },
    Folder {
        root: PathBuf,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default)]
        splits: SplitFractions,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<MultiDomainDataset> {
        match self {
            DatasetSource::Synthetic { seed, spec } => generate_synthetic(spec, *seed),
            DatasetSource::Folder {
                root,
                image_size,
                splits,
                seed,
            } => load_image_folder(root, *image_size, *splits, *seed),
        }
    }

    fn default_target_eval(&self) -> TargetEval {
        match self {
            DatasetSource::Synthetic { .. } => TargetEval::TestSplit,
            DatasetSource::Folder { .. } => TargetEval::FullDomain,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Lrdg, Method::Baseline]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Target domain names; empty runs every leave-one-out fold.
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Leave-one-source-out search over `train.lambda2_grid` × `train.lambda3_grid`.
    #[serde(default)]
    pub select_lambdas: bool,
    /// Protocol seeds; empty means the single seed `train.seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Defaults to the test split for synthetic data and the full domain for folders.
    #[serde(default)]
    pub target_eval: Option<TargetEval>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            targets: Vec::new(),
            methods: default_methods(),
            select_lambdas: false,
            seeds: Vec::new(),
            target_eval: None,
        }
    }
}

fn default_reg_grid() -> Vec<f64> {
    DEFAULT_REG_GRID.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_reg_grid")]
    pub reg_grid: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            enabled: false,
            reg_grid: default_reg_grid(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub divergence: DivergenceConfig,
}

/// 1-based line of `key` inside `[section]` (or of the section header when
/// the key is absent).
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

/// The message of a library error without its kind prefix.
fn bare(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Applies `section.key=value` overrides to a parsed document. Values are
/// parsed as TOML and fall back to plain strings.
fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut parts: Vec<&str> = path.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key in `{assignment}`")))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a configuration file's text. `origin` names the file in error
    /// messages, which carry the offending line number.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(1);
            Error::Config(format!("{origin}:{line}: {}", e.message().trim()))
        })?;
        let config = if overrides.is_empty() {
            config
        } else {
            let mut doc: toml::Table = toml::from_str(text).expect("already parsed");
            for o in overrides {
                apply_override(&mut doc, o)?;
            }
            toml::Value::Table(doc)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("command-line override: {}", e.message().trim())))?
        };
        config.validate().map_err(|(section, key, message)| {
            let line = locate(text, section, key).map_or(String::new(), |l| format!("{l}:"));
            Error::Config(format!("{origin}:{line} {message}"))
        })?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        const TRAIN_KEYS: [&str; 7] = ["learning_rates", "momentum", "weight_decay", "epoch", "batch_size", "grad_clip", "lambda"];
        if let Err(e) = self.train.validate() {
            let msg = bare(e);
            let key = TRAIN_KEYS.iter().find(|k| msg.contains(*k)).copied().unwrap_or("");
            let key = match key {
                "epoch" => "epochs_stage1",
                "lambda" => "weights",
                k => k,
            };
            return Err(("train", key, msg));
        }
        if let DatasetSource::Synthetic { spec, .. } = &self.dataset {
            const DATASET_KEYS: [&str; 7] =
                ["num_classes", "num_domains", "samples_per_class_per_domain", "image_size", "cue_kinds", "cue_strength", "noise_level"];
            spec.validate().map_err(|e| {
                let msg = bare(e);
                let key = DATASET_KEYS.iter().find(|k| msg.contains(*k)).copied().unwrap_or("");
                ("dataset", key, msg)
            })?;
        }
        if self.protocol.methods.is_empty() {
            return Err(("protocol", "methods", "protocol.methods must not be empty".into()));
        }
        if self.divergence.reg_grid.is_empty() || self.divergence.reg_grid.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(("divergence", "reg_grid", "divergence.reg_grid must be a nonempty list of positive values".into()));
        }
        if self.divergence.enabled && !(self.protocol.methods.contains(&Method::Lrdg) && self.protocol.methods.contains(&Method::Baseline)) {
            return Err(("divergence", "enabled", "divergence analysis compares lrdg with baseline; request both methods".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the configuration with the seed and output location
    /// removed, so runs differing only in seed share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.train.seed = 0;
        c.protocol.seeds.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.protocol.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.protocol.seeds.clone()
        }
    }

    pub fn digest_dir(&self) -> PathBuf {
        self.output_dir.join(&self.digest()[..16])
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.digest_dir().join(format!("seed-{seed}"))
    }

    fn protocol_options(&self, dataset: &MultiDomainDataset) -> Result<ProtocolOptions> {
        let targets = self
            .protocol
            .targets
            .iter()
            .map(|t| {
                dataset
                    .domains
                    .iter()
                    .position(|d| &d.name == t)
                    .ok_or_else(|| Error::Config(format!("protocol target `{t}` is not a domain (have {:?})", dataset.domain_names())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProtocolOptions {
            methods: self.protocol.methods.clone(),
            targets,
            target_eval: self.protocol.target_eval.unwrap_or_else(|| self.dataset.default_target_eval()),
            select_lambdas: self.protocol.select_lambdas,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Epoch records as JSON lines, each tagged with the digest and seed.
fn write_log(path: &Path, records: &[EpochRecord], digest: &str, seed: u64) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let mut v = serde_json::to_value(r).expect("record serializes");
        v["config_digest"] = digest.into();
        v["seed"] = seed.into();
        out.push_str(&v.to_string());
        out.push('\n');
    }
    write_text(path, &out)
}

/// Divergence of both models on one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldDivergence {
    pub target: String,
    pub baseline: ModelDivergence,
    pub lrdg: ModelDivergence,
}

pub fn fold_divergence(dataset: &MultiDomainDataset, fold: &FoldOutcome, settings: &DivergenceConfig) -> Result<FoldDivergence> {
    let (Some(lrdg), Some(baseline)) = (&fold.invariant, &fold.baseline) else {
        return Err(Error::Precondition("divergence analysis needs both the lrdg and the baseline model".into()));
    };
    Ok(FoldDivergence {
        target: dataset.domains[fold.fold.target].name.clone(),
        baseline: divergence::analyze_model(baseline, dataset, &fold.fold, &settings.reg_grid, settings.seed)?,
        lrdg: divergence::analyze_model(lrdg, dataset, &fold.fold, &settings.reg_grid, settings.seed)?,
    })
}

/// Writes the PAD table, the scatter plot and the bound reports.
pub fn write_divergence(dir: &Path, results: &[FoldDivergence], digest: &str) -> Result<()> {
    let mut records = Vec::new();
    let mut points = Vec::new();
    for f in results {
        for (model, d) in [("baseline", &f.baseline), ("lrdg", &f.lrdg)] {
            for p in &d.pairwise {
                records.push(PadRecord {
                    model: model.into(),
                    target: f.target.clone(),
                    kind: PadKind::Pairwise,
                    result: p.clone(),
                });
            }
            records.push(PadRecord {
                model: model.into(),
                target: f.target.clone(),
                kind: PadKind::SourceTarget,
                result: d.closest.clone(),
            });
        }
        for (b, l) in f.baseline.pairwise.iter().zip(&f.lrdg.pairwise) {
            points.push((PadKind::Pairwise, b.pad, l.pad));
        }
        points.push((PadKind::SourceTarget, f.baseline.closest.pad, f.lrdg.closest.pad));
    }
    write_pad_report(&records, digest, &dir.join("pad_report.csv"))?;
    write_pad_scatter(&points, &dir.join("pad_scatter.png"))?;
    let bounds: Vec<serde_json::Value> = results
        .iter()
        .map(|f| {
            serde_json::json!({
                "target": f.target,
                "config_digest": digest,
                "baseline": f.baseline.bound,
                "lrdg": f.lrdg.bound,
            })
        })
        .collect();
    write_text(&dir.join("bounds.json"), &serde_json::to_string_pretty(&bounds).expect("bounds serialize"))
}

fn save_fold(dir: &Path, dataset: &MultiDomainDataset, fold: &FoldOutcome, config: &TrainConfig, digest: &str) -> Result<()> {
    let target = &dataset.domains[fold.fold.target].name;
    let ckpt_dir = dir.join("checkpoints").join(target);
    let seed = config.seed;
    if let Some(bank) = &fold.bank {
        let spec = NetworkSpec::Classifier(bank.net().spec().clone());
        for (i, &d) in bank.domains().iter().enumerate() {
            let name = &dataset.domains[d].name;
            Checkpoint::new(spec.clone(), StageTag::Specific, seed, digest, bank.params(i).to_vec())
                .with_label("domain", name)
                .with_label("target", target)
                .save(&ckpt_dir.join(format!("specific-{name}.ckpt")))?;
        }
    }
    if let Some(model) = &fold.invariant {
        let mut mapper = Checkpoint::new(
            NetworkSpec::Mapper(model.mapper.spec().clone()),
            StageTag::Invariant,
            seed,
            digest,
            model.mapper_params.clone(),
        )
        .with_label("target", target)
        .with_label("role", "mapper");
        let mut classifier = Checkpoint::new(
            NetworkSpec::Classifier(model.classifier.spec().clone()),
            StageTag::Invariant,
            seed,
            digest,
            model.classifier_params.clone(),
        )
        .with_label("target", target)
        .with_label("role", "classifier");
        if let Some(sel) = &fold.lambdas {
            for c in [&mut mapper, &mut classifier] {
                *c = c.clone().with_label("lambda2", sel.lambda2).with_label("lambda3", sel.lambda3);
            }
        }
        mapper.save(&ckpt_dir.join("mapper.ckpt"))?;
        classifier.save(&ckpt_dir.join("invariant-classifier.ckpt"))?;
    }
    if let Some(model) = &fold.baseline {
        Checkpoint::new(NetworkSpec::Classifier(model.net.spec().clone()), StageTag::Baseline, seed, digest, model.params.clone())
            .with_label("target", target)
            .save(&ckpt_dir.join("baseline.ckpt"))?;
    }
    for (run, records) in &fold.logs {
        write_log(&dir.join("logs").join(target).join(format!("{run}.jsonl")), records, digest, seed)?;
    }
    Ok(())
}

pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub result: ProtocolResult,
    pub divergence: Vec<FoldDivergence>,
}

/// Runs the configured protocol once per seed and writes every artifact.
/// Artifacts of finished folds stay on disk when a later stage fails.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    let digest = config.digest();
    let dataset = config.dataset.load()?;
    let options = config.protocol_options(&dataset)?;
    let mut runs = Vec::new();
    for seed in config.seeds() {
        let mut cfg = config.clone();
        cfg.train.seed = seed;
        let dir = config.run_dir(seed);
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
        let run_info = serde_json::json!({
            "config_digest": digest,
            "seed": seed,
            "domains": dataset.domain_names(),
            "parallel": crate::par::is_parallel(),
        });
        write_text(&dir.join("run.json"), &serde_json::to_string_pretty(&run_info).expect("json"))?;
        log::info!("run {} (seed {seed}) -> {}", &digest[..16], dir.display());
        let mut result = ProtocolResult::default();
        let mut divergences = Vec::new();
        let folds = make_loo_splits(&dataset)?
            .into_iter()
            .filter(|f| options.targets.is_empty() || options.targets.contains(&f.target))
            .collect::<Vec<_>>();
        if options.methods.contains(&Method::Lrdg) && options.select_lambdas && dataset.num_domains() < 4 {
            return Err(Error::Precondition(format!(
                "lambda selection needs at least 3 source domains per fold; the dataset has {} domains",
                dataset.num_domains()
            )));
        }
        for fold in &folds {
            let outcome = evaluation::run_fold(&dataset, fold, &options, &cfg.train)?;
            save_fold(&dir, &dataset, &outcome, &cfg.train, &digest)?;
            for &(method, accuracy) in &outcome.accuracies {
                result.records.push(evaluation::ProtocolRecord {
                    target: dataset.domains[fold.target].name.clone(),
                    method,
                    accuracy,
                    seed,
                    config_digest: digest.clone(),
                });
            }
            result.write(&dir)?;
            if config.divergence.enabled {
                divergences.push(fold_divergence(&dataset, &outcome, &config.divergence)?);
                write_divergence(&dir.join("pad"), &divergences, &digest)?;
            }
        }
        runs.push(SeedRun {
            seed,
            dir,
            result,
            divergence: divergences,
        });
    }
    if runs.len() > 1 {
        let all = ProtocolResult {
            records: runs.iter().flat_map(|r| r.result.records.clone()).collect(),
        };
        all.write(&config.digest_dir())?;
    }
    Ok(runs)
}

/// Loads a classifier checkpoint, checking its stage tag.
pub fn load_classifier(path: &Path, stage: StageTag) -> Result<TrainedClassifier> {
    let ckpt = Checkpoint::load_expecting(path, stage)?;
    let net = Classifier::new(ckpt.classifier_spec()?.clone())?;
    Ok(TrainedClassifier { net, params: ckpt.params })
}

pub fn load_mapper(path: &Path) -> Result<(Mapper, Vec<f64>)> {
    let ckpt = Checkpoint::load_expecting(path, StageTag::Invariant)?;
    let mapper = Mapper::new(ckpt.mapper_spec()?.clone())?;
    Ok((mapper, ckpt.params))
}

pub fn load_invariant(mapper: &Path, classifier: &Path) -> Result<InvariantModel> {
    let (mapper, mapper_params) = load_mapper(mapper)?;
    let c = load_classifier(classifier, StageTag::Invariant)?;
    if mapper.spec().input != c.net.spec().input {
        return Err(Error::Checkpoint(format!(
            "mapper input {} does not match classifier input {}",
            mapper.spec().input,
            c.net.spec().input
        )));
    }
    Ok(InvariantModel {
        mapper,
        mapper_params,
        classifier: c.net,
        classifier_params: c.params,
    })
}

fn check_shape(dataset: &MultiDomainDataset, model: &dyn Predictor, input: crate::data::ImageShape) -> Result<()> {
    if dataset.image_shape != input || dataset.num_classes != model.num_classes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {input} images and {} classes; dataset has {} and {}",
            model.num_classes(),
            dataset.image_shape,
            dataset.num_classes
        )));
    }
    Ok(())
}

fn domain_index(dataset: &MultiDomainDataset, name: &str) -> Result<usize> {
    dataset
        .domains
        .iter()
        .position(|d| d.name == name)
        .ok_or_else(|| Error::Config(format!("unknown domain `{name}` (have {:?})", dataset.domain_names())))
}

/// Pairwise and closest-mixture PADs of saved baseline and LRDG models on the
/// fold whose target is `target`.
pub fn pad_from_checkpoints(
    config: &ExperimentConfig,
    target: &str,
    baseline: &Path,
    mapper: &Path,
    classifier: &Path,
    out_dir: &Path,
) -> Result<FoldDivergence> {
    let dataset = config.dataset.load()?;
    let base = load_classifier(baseline, StageTag::Baseline)?;
    let lrdg = load_invariant(mapper, classifier)?;
    check_shape(&dataset, &base, base.net.spec().input)?;
    check_shape(&dataset, &lrdg, lrdg.mapper.spec().input)?;
    let t = domain_index(&dataset, target)?;
    let fold = make_loo_splits(&dataset)?.into_iter().find(|f| f.target == t).expect("every domain has a fold");
    let settings = &config.divergence;
    let result = FoldDivergence {
        target: target.to_string(),
        baseline: divergence::analyze_model(&base, &dataset, &fold, &settings.reg_grid, settings.seed)?,
        lrdg: divergence::analyze_model(&lrdg, &dataset, &fold, &settings.reg_grid, settings.seed)?,
    };
    write_divergence(out_dir, std::slice::from_ref(&result), &config.digest())?;
    Ok(result)
}

/// Accuracy of a saved model on a domain (its test split for synthetic data,
/// every sample for folder data).
pub fn eval_checkpoint(config: &ExperimentConfig, domain: &str, model: &dyn Predictor) -> Result<f64> {
    let dataset = config.dataset.load()?;
    let d = domain_index(&dataset, domain)?;
    if model.num_classes() != dataset.num_classes {
        return Err(Error::Checkpoint(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            dataset.num_classes
        )));
    }
    let samples: Vec<&Sample> = match config.protocol.target_eval.unwrap_or_else(|| config.dataset.default_target_eval()) {
        TargetEval::TestSplit => dataset.domains[d].split_samples(crate::data::Split::Test),
        TargetEval::FullDomain => dataset.domains[d].samples.iter().collect(),
    };
    evaluation::accuracy(model, &samples)
}

/// Writes the synthetic dataset described by `config` as image folders.
pub fn synth_gen(config: &ExperimentConfig, out: &Path) -> Result<ExportManifest> {
    let DatasetSource::Synthetic { seed, spec } = &config.dataset else {
        return Err(Error::Config("synth-gen needs a synthetic dataset section".into()));
    };
    let dataset = generate_synthetic(spec, *seed)?;
    export_dataset(&dataset, spec, *seed, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub images: usize,
    /// Mean absolute pixel change `|x - M(x)|`.
    pub mean_abs_change: f64,
    /// Variance across classes of the mean border colour, summed over
    /// channels; `None` when labels are unknown or only one class is present.
    pub tint_variance_raw: Option<f64>,
    pub tint_variance_mapped: Option<f64>,
}

/// Mean colour of the two-pixel image border, which the synthetic glyphs
/// never reach.
pub fn border_colour(image: &[f64], shape: crate::data::ImageShape) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let ring = 2.min(h / 2).min(w / 2);
    (0..shape.channels)
        .map(|c| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if y < ring || y >= h - ring || x < ring || x >= w - ring {
                        sum += image[(c * h + y) * w + x];
                        n += 1;
                    }
                }
            }
            sum / n as f64
        })
        .collect()
}

/// Across-class variance of per-class mean border colours.
pub fn tint_variance(images: &[&[f64]], labels: &[usize], shape: crate::data::ImageShape) -> Option<f64> {
    let classes = labels.iter().copied().max()? + 1;
    let mut sums = vec![vec![0.0; shape.channels]; classes];
    let mut counts = vec![0usize; classes];
    for (img, &l) in images.iter().zip(labels) {
        for (s, v) in sums[l].iter_mut().zip(border_colour(img, shape)) {
            *s += v;
        }
        counts[l] += 1;
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    if means.len() < 2 {
        return None;
    }
    let k = means.len() as f64;
    Some(
        (0..shape.channels)
            .map(|c| {
                let mu = means.iter().map(|m| m[c]).sum::<f64>() / k;
                means.iter().map(|m| (m[c] - mu).powi(2)).sum::<f64>() / k
            })
            .sum(),
    )
}

/// Maps `images` and writes a grid: originals on the top row, mapped images
/// below.
pub fn inspect_mapper(mapper: &Mapper, params: &[f64], images: &[&[f64]], labels: Option<&[usize]>, out: &Path) -> Result<InspectReport> {
    if images.is_empty() {
        return Err(Error::Precondition("inspect needs at least one image".into()));
    }
    let shape = mapper.spec().input;
    let mapped = mapper.map_batch(params, images)?;
    let total: usize = images.len() * shape.len();
    let change = images
        .iter()
        .zip(&mapped)
        .flat_map(|(x, m)| x.iter().zip(m).map(|(a, b)| (a - b).abs()))
        .sum::<f64>()
        / total as f64;
    let mapped_refs: Vec<&[f64]> = mapped.iter().map(Vec::as_slice).collect();
    let (raw_var, mapped_var) = match labels {
        Some(l) => (tint_variance(images, l, shape), tint_variance(&mapped_refs, l, shape)),
        None => (None, None),
    };
    let (h, w) = (shape.height as u32, shape.width as u32);
    let gap = 2u32;
    let cols = images.len() as u32;
    let mut grid = image::RgbImage::from_pixel(cols * (w + gap) + gap, 2 * (h + gap) + gap, image::Rgb([255, 255, 255]));
    for (row, set) in [images.to_vec(), mapped_refs].iter().enumerate() {
        for (col, img) in set.iter().enumerate() {
            let (ox, oy) = (gap + col as u32 * (w + gap), gap + row as u32 * (h + gap));
            for y in 0..h {
                for x in 0..w {
                    let px = |c: usize| {
                        let c = c.min(shape.channels - 1);
                        (img[(c * shape.height + y as usize) * shape.width + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8
                    };
                    grid.put_pixel(ox + x, oy + y, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    grid.save(out).map_err(|e| Error::Image {
        path: out.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(InspectReport {
        images: images.len(),
        mean_abs_change: change,
        tint_variance_raw: raw_var,
        tint_variance_mapped: mapped_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"

[dataset]
kind = "synthetic"
num_domains = 3
samples_per_class_per_domain = 4
cue_kinds = ["tint", "stripe", "none"]
cue_strength = 0.9

[train]
learning_rates = [0.05]
epochs_stage1 = 1
"#;

    #[test]
    fn parses_defaults_and_roundtrips() {
        let c = ExperimentConfig::parse(MINIMAL, "c.toml", &[]).unwrap();
        assert_eq!(c.train.learning_rates, vec![0.05]);
        assert_eq!(c.train.epochs_stage2, 30);
        assert_eq!(c.protocol.methods, vec![Method::Lrdg, Method::Baseline]);
        let back = ExperimentConfig::parse(&c.to_toml(), "c.toml", &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn digest_ignores_seed_and_output_dir_only() {
        let c = ExperimentConfig::parse(MINIMAL, "c.toml", &[]).unwrap();
        let mut d = c.clone();
        d.train.seed = 9;
        d.output_dir = "elsewhere".into();
        assert_eq!(c.digest(), d.digest());
        assert_ne!(c.run_dir(0), c.run_dir(9));
        d.train.epochs_stage1 = 2;
        assert_ne!(c.digest(), d.digest());
        assert_eq!(c.digest().len(), 64);
    }

    #[test]
    fn overrides_take_precedence() {
        let c = ExperimentConfig::parse(MINIMAL, "c.toml", &["train.seed=4".into(), "train.learning_rates=[0.1, 0.2]".into()]).unwrap();
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.train.learning_rates, vec![0.1, 0.2]);
        assert!(ExperimentConfig::parse(MINIMAL, "c.toml", &["train.seed".into()]).is_err());
    }

    #[test]
    fn shipped_benchmark_config_parses() {
        let c = ExperimentConfig::parse(include_str!("../../../configs/benchmark.toml"), "benchmark.toml", &[]).unwrap();
        assert_eq!(c.train.learning_rates_for(crate::training::Stage::Specific), &[0.1]);
        assert_eq!(c.train.weights.lambda2, 3.0);
        assert!(c.divergence.enabled);
        assert_eq!(c.dataset.load().unwrap().num_domains(), 4);
    }

    #[test]
    fn errors_name_the_line() {
        let bad = MINIMAL.replace("learning_rates = [0.05]", "learning_rates = [-1.0]");
        let e = ExperimentConfig::parse(&bad, "c.toml", &[]).unwrap_err().to_string();
        let line = bad.lines().position(|l| l.starts_with("learning_rates")).unwrap() + 1;
        assert!(e.contains(&format!("c.toml:{line}:")), "{e}");

        let typo = MINIMAL.replace("epochs_stage1 = 1", "epochs_stage1 = \"one\"");
        let e = ExperimentConfig::parse(&typo, "c.toml", &[]).unwrap_err().to_string();
        let line = typo.lines().position(|l| l.starts_with("epochs_stage1")).unwrap() + 1;
        assert!(e.contains(&format!("c.toml:{line}:")), "{e}");
    }

    #[test]
    fn tint_variance_oracle() {
        let shape = crate::data::ImageShape::new(3, 4, 4);
        let flat = |v: [f64; 3]| -> Vec<f64> { v.iter().flat_map(|&c| std::iter::repeat(c).take(16)).collect() };
        let a = flat([0.0, 0.0, 0.0]);
        let b = flat([1.0, 0.5, 0.0]);
        let imgs: Vec<&[f64]> = vec![&a, &b];
        // class means 0 and (1, 0.5, 0): per-channel variance 0.25 + 0.0625 + 0
        assert!((tint_variance(&imgs, &[0, 1], shape).unwrap() - 0.3125).abs() < 1e-12);
        assert_eq!(tint_variance(&imgs, &[0, 0], shape), None);
    }
}
