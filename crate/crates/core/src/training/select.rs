use serde::{Deserialize, Serialize};

use super::specific::train_bank;
use super::{train_domain_invariant, Sources, TrainConfig};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::evaluation::accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda2: f64,
    pub lambda3: f64,
    /// Held-out-source accuracy per inner fold, in source order.
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda2: f64,
    pub lambda3: f64,
    pub scores: Vec<LambdaScore>,
}

fn sorted(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Returns the pair with the highest mean held-out accuracy among scored
/// candidates; ties go to the smaller `lambda2`, then the smaller `lambda3`.
pub fn pick_best(scores: &[LambdaScore]) -> Option<(f64, f64)> {
    let mut best: Option<&LambdaScore> = None;
    for s in scores {
        let better = match best {
            None => true,
            Some(b) => {
                s.mean > b.mean
                    || (s.mean == b.mean && (s.lambda2, s.lambda3).partial_cmp(&(b.lambda2, b.lambda3)) == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            best = Some(s);
        }
    }
    best.map(|b| (b.lambda2, b.lambda3))
}

/// Leave-one-source-out selection of the stage-2 weights. Each inner fold
/// trains its stage-1 bank once and reuses it across the grid.
pub fn select_lambdas(sources: &Sources<'_>, config: &TrainConfig) -> Result<LambdaSelection> {
    let (g2, g3) = (sorted(&config.lambda2_grid), sorted(&config.lambda3_grid));
    if g2.is_empty() || g3.is_empty() {
        return Err(Error::Config("lambda grids must be nonempty".into()));
    }
    if sources.domains.len() < 3 {
        return Err(Error::Precondition(format!(
            "lambda selection needs at least 3 source domains so every inner fold keeps 2 for stage 1, got {}",
            sources.domains.len()
        )));
    }
    if g2.len() == 1 && g3.len() == 1 {
        return Ok(LambdaSelection {
            lambda2: g2[0],
            lambda3: g3[0],
            scores: Vec::new(),
        });
    }
    let mut fold_scores = vec![vec![Vec::new(); g3.len()]; g2.len()];
    for (k, &held_out) in sources.domains.iter().enumerate() {
        let inner: Vec<usize> = sources.domains.iter().copied().filter(|&d| d != held_out).collect();
        let inner_sources = Sources {
            dataset: sources.dataset,
            domains: &inner,
            audit: sources.audit,
        };
        let mut fold_config = config.clone();
        fold_config.seed = crate::rng::derive(config.seed, "lambda-fold", &[k as u64]);
        let (mut bank, _) = train_bank(&inner_sources, &fold_config)?;
        bank.freeze();
        let mut held: Vec<_> = sources.split(held_out, Split::Train);
        held.extend(sources.split(held_out, Split::Val));
        for (i, &l2) in g2.iter().enumerate() {
            for (j, &l3) in g3.iter().enumerate() {
                let mut c = fold_config.clone();
                c.weights.lambda2 = l2;
                c.weights.lambda3 = l3;
                let outcome = train_domain_invariant(&bank, &inner_sources, &c)?;
                let score = accuracy(&outcome.model, &held)?;
                log::info!("lambda2={l2} lambda3={l3} held-out {held_out}: {score:.3}");
                fold_scores[i][j].push(score);
            }
        }
        bank.verify()?;
    }
    let mut scores = Vec::new();
    for (i, &l2) in g2.iter().enumerate() {
        for (j, &l3) in g3.iter().enumerate() {
            let f = fold_scores[i][j].clone();
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            scores.push(LambdaScore {
                lambda2: l2,
                lambda3: l3,
                fold_scores: f,
                mean,
            });
        }
    }
    let (lambda2, lambda3) = pick_best(&scores).expect("grid is nonempty");
    Ok(LambdaSelection { lambda2, lambda3, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(l2: f64, l3: f64, mean: f64) -> LambdaScore {
        LambdaScore {
            lambda2: l2,
            lambda3: l3,
            fold_scores: vec![mean],
            mean,
        }
    }

    #[test]
    fn ties_prefer_smaller_lambdas() {
        let s = [score(1.0, 0.1, 0.8), score(0.1, 1.0, 0.8), score(0.1, 10.0, 0.8), score(10.0, 0.1, 0.7)];
        assert_eq!(pick_best(&s), Some((0.1, 1.0)));
        let s = [score(0.1, 0.1, 0.5), score(10.0, 10.0, 0.9)];
        assert_eq!(pick_best(&s), Some((10.0, 10.0)));
    }
}
