//! Shared optimization loop: momentum SGD over parameter groups, per-epoch
//! validation, best-checkpoint selection and patience-based stopping.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub run: String,
    pub epoch: usize,
    pub learning_rate: f64,
    pub classification: f64,
    pub uncertainty: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub val_accuracy: f64,
    pub val_objective: f64,
}

/// Per-epoch training log, written as one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad metrics record: {e}"))))
            .collect::<Result<_>>()?;
        Ok(MetricsLog { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Validation summary; higher accuracy wins. Ties go to the lower objective
/// when the problem asks for it and to the earlier candidate otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Validation {
    pub accuracy: f64,
    pub objective: f64,
}

impl Validation {
    fn beats(&self, other: &Validation, objective_breaks_ties: bool) -> bool {
        self.accuracy > other.accuracy || (objective_breaks_ties && self.accuracy == other.accuracy && self.objective < other.objective)
    }
}

/// A training problem the engine can optimize.
pub(crate) trait Objective: Sync {
    type Step: Send + Sync;

    /// Whether equal validation accuracies are ranked by the objective.
    const OBJECTIVE_BREAKS_TIES: bool = true;

    fn init(&self) -> Vec<Vec<f64>>;

    /// Batches of one epoch; `rng` is private to `(run, learning rate, epoch)`.
    fn plan_epoch(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Self::Step>;

    fn gradient(&self, params: &[Vec<f64>], step: &Self::Step) -> Result<(Vec<Vec<f64>>, LossTerms)>;

    fn validate(&self, params: &[Vec<f64>]) -> Result<Validation>;
}

/// Complete optimizer state; enough to resume a run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run: String,
    pub learning_rate: f64,
    pub params: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
    pub next_epoch: usize,
    pub best_params: Vec<Vec<f64>>,
    pub best_accuracy: Option<f64>,
    pub best_objective: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub stopped: bool,
    pub log: MetricsLog,
}

impl RunState {
    pub(crate) fn fresh(run: &str, learning_rate: f64, params: Vec<Vec<f64>>) -> Self {
        let velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        RunState {
            run: run.to_string(),
            learning_rate,
            best_params: params.clone(),
            params,
            velocity,
            next_epoch: 0,
            best_accuracy: None,
            best_objective: None,
            best_epoch: None,
            stale_epochs: 0,
            stopped: false,
            log: MetricsLog::default(),
        }
    }

    fn best(&self) -> Option<Validation> {
        Some(Validation {
            accuracy: self.best_accuracy?,
            objective: self.best_objective?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("state serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad run state: {e}")))
    }
}

fn check_finite(run: &str, epoch: usize, terms: &LossTerms) -> Result<()> {
    if terms.total.is_finite() {
        return Ok(());
    }
    Err(Error::Diverged(format!(
        "run `{run}` epoch {epoch}: loss became non-finite (classification {}, uncertainty {}, reconstruction {})",
        terms.classification, terms.uncertainty, terms.reconstruction
    )))
}

/// Runs epochs until `epochs` or the patience limit is reached. Resuming
/// from a saved [`RunState`] continues exactly as an uninterrupted run.
pub(crate) fn fit<O: Objective>(objective: &O, config: &TrainConfig, epochs: usize, mut state: RunState) -> Result<RunState> {
    let lr = state.learning_rate;
    while state.next_epoch < epochs && !state.stopped {
        let epoch = state.next_epoch;
        let mut rng = rng::stream(config.seed, &state.run, &[lr.to_bits(), epoch as u64]);
        let steps = objective.plan_epoch(&mut rng);
        let mut sums = LossTerms::default();
        for step in &steps {
            let (mut grads, terms) = objective.gradient(&state.params, step)?;
            check_finite(&state.run, epoch, &terms)?;
            if let Some(max_norm) = config.grad_clip {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max_norm {
                    let scale = max_norm / norm;
                    grads.iter_mut().flatten().for_each(|g| *g *= scale);
                }
            }
            for ((p, v), g) in state.params.iter_mut().zip(&mut state.velocity).zip(&grads) {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = config.momentum * *vi + gi + config.weight_decay * *pi;
                    *pi -= lr * *vi;
                }
            }
            sums.classification += terms.classification;
            sums.uncertainty += terms.uncertainty;
            sums.reconstruction += terms.reconstruction;
            sums.total += terms.total;
        }
        let n = steps.len().max(1) as f64;
        let val = objective.validate(&state.params)?;
        if !val.objective.is_finite() {
            return Err(Error::Diverged(format!(
                "run `{}` epoch {epoch}: validation objective is non-finite",
                state.run
            )));
        }
        state.log.records.push(EpochRecord {
            run: state.run.clone(),
            epoch,
            learning_rate: lr,
            classification: sums.classification / n,
            uncertainty: sums.uncertainty / n,
            reconstruction: sums.reconstruction / n,
            total: sums.total / n,
            val_accuracy: val.accuracy,
            val_objective: val.objective,
        });
        log::debug!(
            "{} epoch {epoch}: loss {:.4} val acc {:.3} val obj {:.4}",
            state.run,
            sums.total / n,
            val.accuracy,
            val.objective
        );
        let improved = state.best().map_or(true, |best| val.beats(&best, O::OBJECTIVE_BREAKS_TIES));
        if improved {
            state.best_accuracy = Some(val.accuracy);
            state.best_objective = Some(val.objective);
            state.best_epoch = Some(epoch);
            state.best_params = state.params.clone();
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        state.next_epoch += 1;
        if config.patience.is_some_and(|p| state.stale_epochs >= p) {
            state.stopped = true;
        }
    }
    Ok(state)
}

/// Trains once per candidate learning rate and keeps the run with the best
/// selected validation score (earlier candidates win ties). Candidates that
/// diverge are discarded unless every candidate diverges.
pub(crate) fn fit_over_learning_rates<O: Objective>(
    objective: &O,
    config: &TrainConfig,
    rates: &[f64],
    epochs: usize,
    run: &str,
) -> Result<RunState> {
    let init = objective.init();
    let mut best: Option<RunState> = None;
    let mut last_err = None;
    for &lr in rates {
        match fit(objective, config, epochs, RunState::fresh(run, lr, init.clone())) {
            Ok(state) => {
                let better = match (&best, state.best()) {
                    (None, _) => true,
                    (Some(b), Some(v)) => b.best().map_or(true, |bv| v.beats(&bv, O::OBJECTIVE_BREAKS_TIES)),
                    (Some(_), None) => false,
                };
                if better {
                    best = Some(state);
                }
            }
            Err(Error::Diverged(msg)) if rates.len() > 1 => {
                log::warn!("{msg}; discarding learning rate {lr}");
                last_err = Some(Error::Diverged(msg));
            }
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Config("no learning rates configured".into())))
}

/// For each step, `batch` positions into every domain's list of train
/// samples. Each domain is visited in a fresh random order per epoch and
/// wraps around when it runs out.
pub(crate) fn balanced_batches(
    lens: &[usize],
    steps: usize,
    batch: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<Vec<usize>>> {
    let orders: Vec<Vec<usize>> = lens
        .iter()
        .map(|&n| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    (0..steps)
        .map(|s| {
            orders
                .iter()
                .map(|o| {
                    if o.is_empty() {
                        return Vec::new();
                    }
                    (0..batch).map(|k| o[(s * batch + k) % o.len()]).collect()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn balanced_batches_cover_each_domain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let plan = balanced_batches(&[10, 4], 3, 4, &mut rng);
        assert_eq!(plan.len(), 3);
        let mut first: Vec<usize> = plan.iter().flat_map(|s| s[0].clone()).take(10).collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert!(plan.iter().all(|s| s[1].len() == 4 && s[1].iter().all(|&i| i < 4)));
    }

    /// Least squares on a single weight, used to exercise the loop.
    struct Quadratic;

    impl Objective for Quadratic {
        type Step = f64;

        fn init(&self) -> Vec<Vec<f64>> {
            vec![vec![5.0]]
        }

        fn plan_epoch(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
            use rand::Rng;
            (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect()
        }

        fn gradient(&self, params: &[Vec<f64>], noise: &f64) -> Result<(Vec<Vec<f64>>, LossTerms)> {
            let w = params[0][0];
            let loss = (w - 2.0).powi(2);
            Ok((
                vec![vec![2.0 * (w - 2.0) + noise]],
                LossTerms {
                    classification: loss,
                    total: loss,
                    ..Default::default()
                },
            ))
        }

        fn validate(&self, params: &[Vec<f64>]) -> Result<Validation> {
            Ok(Validation {
                accuracy: 0.0,
                objective: (params[0][0] - 2.0).powi(2),
            })
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            learning_rates: vec![0.05],
            patience: None,
            ..Default::default()
        }
    }

    #[test]
    fn converges_and_resumes_identically() {
        let cfg = config();
        let full = fit(&Quadratic, &cfg, 8, RunState::fresh("q", 0.05, Quadratic.init())).unwrap();
        assert!((full.best_params[0][0] - 2.0).abs() < 0.5);
        let half = fit(&Quadratic, &cfg, 4, RunState::fresh("q", 0.05, Quadratic.init())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        half.save(&path).unwrap();
        let resumed = fit(&Quadratic, &cfg, 8, RunState::load(&path).unwrap()).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            learning_rates: vec![10.0],
            grad_clip: None,
            momentum: 0.0,
            patience: None,
            ..Default::default()
        };
        let err = fit(&Quadratic, &cfg, 400, RunState::fresh("q", 10.0, Quadratic.init())).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }

    #[test]
    fn metrics_log_roundtrip() {
        let cfg = config();
        let state = fit(&Quadratic, &cfg, 3, RunState::fresh("q", 0.05, Quadratic.init())).unwrap();
        let text = state.log.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(MetricsLog::from_jsonl(&text).unwrap(), state.log);
    }
}
