use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lrdg::data::Split;
use lrdg::experiment::{self, ExperimentConfig};
use lrdg::nets::{Predictor, StageTag};

#[derive(Parser, Debug)]
#[command(name = "lrdg", version, about = "Learn and remove domain-specific features for domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override any key, e.g. `--set train.epochs_stage2=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        if let Some(dir) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", dir.display().to_string()));
        }
        Ok(ExperimentConfig::load(&self.config, &overrides)?)
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Baseline classifier checkpoint.
    #[arg(long, conflicts_with_all = ["mapper", "classifier"])]
    baseline: Option<PathBuf>,
    /// Mapper checkpoint of an LRDG model.
    #[arg(long, requires = "classifier")]
    mapper: Option<PathBuf>,
    /// Invariant classifier checkpoint of an LRDG model.
    #[arg(long, requires = "mapper")]
    classifier: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate the configured leave-one-domain-out protocol.
    Run(ConfigArgs),
    /// Proxy A-distances of a saved baseline and LRDG model on one fold.
    Pad {
        #[command(flatten)]
        config: ConfigArgs,
        /// Target domain of the fold.
        #[arg(long)]
        target: String,
        /// A run directory; checkpoints are read from `checkpoints/<target>/`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
        /// Output directory for the report and plot.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write originals and mapped images side by side.
    Inspect {
        #[arg(long)]
        mapper: PathBuf,
        /// Take images from this domain of the configured dataset.
        #[arg(long, requires = "domain", conflicts_with = "images")]
        config: Option<PathBuf>,
        #[arg(long)]
        domain: Option<String>,
        /// Or from a directory of image files.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the configured synthetic dataset as image folders.
    SynthGen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a saved model on one domain.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        domain: String,
        #[command(flatten)]
        models: ModelArgs,
    },
}

fn load_model(models: &ModelArgs) -> Result<Box<dyn Predictor>> {
    match (&models.baseline, &models.mapper, &models.classifier) {
        (Some(b), None, None) => Ok(Box::new(experiment::load_classifier(b, StageTag::Baseline)?)),
        (None, Some(m), Some(c)) => Ok(Box::new(experiment::load_invariant(m, c)?)),
        _ => bail!("give either --baseline or both --mapper and --classifier"),
    }
}

fn cmd_run(args: &ConfigArgs) -> Result<()> {
    let config = args.load()?;
    let runs = experiment::run_experiment(&config)?;
    for run in &runs {
        println!("seed {} -> {}", run.seed, run.dir.display());
        print!("{}", run.result.to_table());
        for f in &run.divergence {
            println!("target {}: baseline {}", f.target, f.baseline.bound);
            println!("target {}: lrdg     {}", f.target, f.lrdg.bound);
        }
    }
    if runs.len() > 1 {
        let all = lrdg::evaluation::ProtocolResult {
            records: runs.iter().flat_map(|r| r.result.records.clone()).collect(),
        };
        for a in all.averages() {
            println!("{}: {:.2} ± {:.2} over {} seeds", a.method.name(), 100.0 * a.mean, 100.0 * a.std, a.seeds);
        }
    }
    Ok(())
}

fn read_image_dir(dir: &Path, size: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.truncate(count);
    paths.iter().map(|p| Ok(lrdg::data::decode_image(p, size)?)).collect()
}

fn cmd_inspect(mapper: &Path, config: Option<&Path>, domain: Option<&str>, images: Option<&Path>, count: usize, out: &Path) -> Result<()> {
    let (net, params) = experiment::load_mapper(mapper)?;
    let shape = net.spec().input;
    let (imgs, labels): (Vec<Vec<f64>>, Option<Vec<usize>>) = match (config, domain, images) {
        (Some(c), Some(d), None) => {
            let ds = ExperimentConfig::load(c, &[])?.dataset.load()?;
            let dom = ds
                .domains
                .iter()
                .find(|x| x.name == d)
                .with_context(|| format!("unknown domain `{d}`"))?;
            let mut picked = dom.split_samples(Split::Test);
            picked.truncate(count);
            (picked.iter().map(|s| s.image.clone()).collect(), Some(picked.iter().map(|s| s.label).collect()))
        }
        (None, None, Some(dir)) => {
            if shape.height != shape.width {
                bail!("image directories need a square mapper input, got {shape}");
            }
            (read_image_dir(dir, shape.height, count)?, None)
        }
        _ => bail!("give either --config with --domain, or --images"),
    };
    let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
    let report = experiment::inspect_mapper(&net, &params, &refs, labels.as_deref(), out)?;
    println!("wrote {} ({} images)", out.display(), report.images);
    println!("mean |x - M(x)| = {:.6}", report.mean_abs_change);
    if let (Some(raw), Some(mapped)) = (report.tint_variance_raw, report.tint_variance_mapped) {
        println!("per-class border tint variance: x {raw:.6}, M(x) {mapped:.6}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Pad {
            config,
            target,
            run_dir,
            models,
            out,
        } => {
            let cfg = config.load()?;
            let (baseline, mapper, classifier) = match (&run_dir, &models.baseline, &models.mapper, &models.classifier) {
                (Some(dir), None, None, None) => {
                    let d = dir.join("checkpoints").join(&target);
                    (d.join("baseline.ckpt"), d.join("mapper.ckpt"), d.join("invariant-classifier.ckpt"))
                }
                (None, Some(b), Some(m), Some(c)) => (b.clone(), m.clone(), c.clone()),
                _ => bail!("give either --run-dir or all of --baseline, --mapper and --classifier"),
            };
            let r = experiment::pad_from_checkpoints(&cfg, &target, &baseline, &mapper, &classifier, &out)?;
            for (b, l) in r.baseline.pairwise.iter().zip(&r.lrdg.pairwise) {
                println!("{:<24} baseline {:.3}  lrdg {:.3}", b.label, b.pad, l.pad);
            }
            println!(
                "closest mixture to {}: baseline {} pad {:.3}, lrdg {} pad {:.3}",
                target, r.baseline.mixture, r.baseline.closest.pad, r.lrdg.mixture, r.lrdg.closest.pad
            );
            println!("baseline {}", r.baseline.bound);
            println!("lrdg     {}", r.lrdg.bound);
            Ok(())
        }
        Command::Inspect {
            mapper,
            config,
            domain,
            images,
            count,
            out,
        } => cmd_inspect(&mapper, config.as_deref(), domain.as_deref(), images.as_deref(), count, &out),
        Command::SynthGen { config, out } => {
            let manifest = experiment::synth_gen(&config.load()?, &out)?;
            println!("wrote {} images to {}", manifest.samples.len(), out.display());
            Ok(())
        }
        Command::Eval { config, domain, models } => {
            let cfg = config.load()?;
            let model = load_model(&models)?;
            let acc = experiment::eval_checkpoint(&cfg, &domain, model.as_ref())?;
            println!("{domain}: accuracy {acc:.4}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<lrdg::Error>(), Some(lrdg::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
