//! Scalar objectives, all in minimization form.
//!
//! The uncertainty loss is returned with its sign already applied (negative
//! entropy, or cross-entropy towards the least likely class), so both stage
//! objectives are plain minimizations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyVariant {
    #[default]
    Entropy,
    LeastLikely,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionKind {
    #[default]
    L2,
    L1,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(-log_softmax(logits)[label])
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_label(label, logits.len())?;
    let logp = log_softmax(logits);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(i, lp)| lp.exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok((-logp[label], grad))
}

/// Natural-log entropy of `softmax(logits)`, probabilities floored at
/// [`PROB_FLOOR`] inside the logarithm.
pub fn entropy(logits: &[f64]) -> f64 {
    softmax(logits)
        .iter()
        .map(|&p| -p * p.max(PROB_FLOOR).ln())
        .sum()
}

/// Entropy and its gradient with respect to the logits.
pub fn entropy_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let h: f64 = p.iter().map(|&q| -q * q.max(PROB_FLOOR).ln()).sum();
    // dH/dp_i for the floored expression.
    let dh_dp: Vec<f64> = p
        .iter()
        .map(|&q| {
            if q > PROB_FLOOR {
                -(q.ln() + 1.0)
            } else {
                -PROB_FLOOR.ln()
            }
        })
        .collect();
    let mean: f64 = dh_dp.iter().zip(&p).map(|(g, q)| g * q).sum();
    let grad = p.iter().zip(&dh_dp).map(|(q, g)| q * (g - mean)).collect();
    (h, grad)
}

/// The class the least-likely variant trains towards: the argmin of the
/// logits, which is also the argmin of the softmax.
pub fn least_likely_label(logits: &[f64]) -> usize {
    argmin(logits)
}

pub fn uncertainty_loss(logits: &[f64], variant: UncertaintyVariant) -> f64 {
    uncertainty_loss_grad(logits, variant).0
}

/// Uncertainty loss in minimization form and its gradient. The least-likely
/// target label is treated as a constant.
pub fn uncertainty_loss_grad(logits: &[f64], variant: UncertaintyVariant) -> (f64, Vec<f64>) {
    match variant {
        UncertaintyVariant::Entropy => {
            let (h, g) = entropy_grad(logits);
            (-h, g.into_iter().map(|v| -v).collect())
        }
        UncertaintyVariant::LeastLikely => {
            let label = least_likely_label(logits);
            cross_entropy_grad(logits, label).expect("argmin is a valid label")
        }
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} values", b.len()), format!("{} values", a.len())));
    }
    Ok(())
}

pub fn reconstruction_loss(mapped: &[f64], original: &[f64], kind: ReconstructionKind) -> Result<f64> {
    Ok(reconstruction_loss_grad(mapped, original, kind)?.0)
}

/// Mean pixel-wise reconstruction loss and its gradient with respect to
/// `mapped`.
pub fn reconstruction_loss_grad(mapped: &[f64], original: &[f64], kind: ReconstructionKind) -> Result<(f64, Vec<f64>)> {
    check_same_len(mapped, original)?;
    let n = mapped.len().max(1) as f64;
    let diffs = mapped.iter().zip(original).map(|(z, x)| z - x);
    Ok(match kind {
        ReconstructionKind::L2 => {
            let grad: Vec<f64> = diffs.map(|d| 2.0 * d / n).collect();
            let loss = mapped.iter().zip(original).map(|(z, x)| (z - x) * (z - x)).sum::<f64>() / n;
            (loss, grad)
        }
        ReconstructionKind::L1 => {
            let grad: Vec<f64> = diffs
                .map(|d| {
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect();
            let loss = mapped.iter().zip(original).map(|(z, x)| (z - x).abs()).sum::<f64>() / n;
            (loss, grad)
        }
    })
}

/// Logits with their class labels.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub logits: &'a [f64],
    pub label: usize,
}

/// Individual terms of a stage objective, already averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub classification: f64,
    pub uncertainty: f64,
    pub reconstruction: f64,
    pub total: f64,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// Stage-1 objective for classifier `i`: mean cross-entropy on its own
/// domain plus `lambda1` times the mean uncertainty loss over the pooled
/// samples of every other source domain.
pub fn stage1_loss(
    own: &[Labeled<'_>],
    others: &[Vec<Vec<f64>>],
    weights: &LossWeights,
    variant: UncertaintyVariant,
) -> Result<LossTerms> {
    if own.is_empty() {
        return Err(Error::Precondition("own-domain batch is empty".into()));
    }
    if others.is_empty() || others.iter().any(Vec::is_empty) {
        return Err(Error::Precondition(
            "stage-1 objective needs a nonempty batch from every other source domain".into(),
        ));
    }
    let ce: Vec<f64> = own
        .iter()
        .map(|s| cross_entropy(s.logits, s.label))
        .collect::<Result<_>>()?;
    let classification = mean(ce.into_iter());
    let uncertainty = mean(others.iter().flatten().map(|l| uncertainty_loss(l, variant)).collect::<Vec<_>>().into_iter());
    Ok(LossTerms {
        classification,
        uncertainty,
        reconstruction: 0.0,
        total: classification + weights.lambda1 * uncertainty,
    })
}

/// One mapped sample as seen by the stage-2 objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Sample<'a> {
    /// Domain-invariant classifier logits on the mapped image.
    pub invariant_logits: &'a [f64],
    pub label: usize,
    /// Logits of the sample's own frozen domain-specific classifier on the
    /// mapped image; `None` when the bank has no classifier for its domain.
    pub specific_logits: Option<&'a [f64]>,
    pub mapped: &'a [f64],
    pub original: &'a [f64],
}

/// Stage-2 objective: classification through the mapper, `lambda2` times the
/// uncertainty of each sample's own frozen classifier, and `lambda3` times
/// the reconstruction loss (mean over every pixel of the batch).
pub fn stage2_loss(
    batch: &[Stage2Sample<'_>],
    weights: &LossWeights,
    variant: UncertaintyVariant,
    reconstruction: ReconstructionKind,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Precondition("stage-2 batch is empty".into()));
    }
    let mut ce = Vec::with_capacity(batch.len());
    let mut unc = Vec::with_capacity(batch.len());
    let mut rec = Vec::with_capacity(batch.len());
    for s in batch {
        ce.push(cross_entropy(s.invariant_logits, s.label)?);
        let specific = s
            .specific_logits
            .ok_or_else(|| Error::Precondition("no frozen classifier for a source domain in the batch".into()))?;
        unc.push(uncertainty_loss(specific, variant));
        rec.push(reconstruction_loss(s.mapped, s.original, reconstruction)?);
    }
    let (classification, uncertainty, reconstruction) = (mean(ce.into_iter()), mean(unc.into_iter()), mean(rec.into_iter()));
    Ok(LossTerms {
        classification,
        uncertainty,
        reconstruction,
        total: classification + weights.lambda2 * uncertainty + weights.lambda3 * reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Naive softmax + log, no stabilization.
    fn ce_oracle(logits: &[f64], label: usize) -> f64 {
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        -(logits[label].exp() / z).ln()
    }

    fn entropy_of_probs(p: &[f64]) -> f64 {
        p.iter().map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 }).sum()
    }

    #[test]
    fn cross_entropy_reference_values() {
        assert_abs_diff_eq!(cross_entropy(&[0.3; 4], 2).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert!(cross_entropy(&[1000.0, 0.0, 0.0, 0.0], 0).unwrap() < 1e-6);
        let oracle = ce_oracle(&[2.0, 0.0, 0.0], 0);
        // ln(1 + 2e^-2)
        assert_abs_diff_eq!(oracle, 0.239_545, epsilon = 1e-6);
        assert_abs_diff_eq!(cross_entropy(&[2.0, 0.0, 0.0], 0).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn entropy_reference_values() {
        assert_abs_diff_eq!(entropy(&[0.0; 7]), 7f64.ln(), epsilon = 1e-12);
        assert!(entropy(&[500.0, 0.0, 0.0]) < 1e-9);
        let probs = [0.5, 0.25, 0.25];
        let oracle = entropy_of_probs(&probs);
        assert_abs_diff_eq!(oracle, 1.039_721, epsilon = 1e-6);
        let logits: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
        assert_abs_diff_eq!(entropy(&logits), oracle, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_sign_and_least_likely() {
        assert_abs_diff_eq!(
            uncertainty_loss(&[0.0; 7], UncertaintyVariant::Entropy),
            -1.945_910,
            epsilon = 1e-6
        );
        assert_eq!(least_likely_label(&[3.0, 2.0, 1.0]), 2);
        let oracle = ce_oracle(&[3.0, 2.0, 1.0], 2);
        assert_abs_diff_eq!(oracle, 2.407_606, epsilon = 1e-6);
        assert_abs_diff_eq!(
            uncertainty_loss(&[3.0, 2.0, 1.0], UncertaintyVariant::LeastLikely),
            oracle,
            epsilon = 1e-12
        );
        // Ties go to the lowest index.
        assert_eq!(least_likely_label(&[1.0, 0.0, 0.0]), 1);
    }

    #[test]
    fn reconstruction_values_and_errors() {
        let a = vec![0.3, 0.6, 0.9];
        assert_eq!(reconstruction_loss(&a, &a, ReconstructionKind::L2).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v - 0.1).collect();
        assert_abs_diff_eq!(reconstruction_loss(&a, &b, ReconstructionKind::L2).unwrap(), 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(reconstruction_loss(&a, &b, ReconstructionKind::L1).unwrap(), 0.1, epsilon = 1e-12);
        assert!(matches!(
            reconstruction_loss(&a, &b[..2], ReconstructionKind::L2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn stage1_reductions() {
        let own_logits = [vec![0.0; 7], vec![0.0; 7]];
        let own: Vec<Labeled> = own_logits.iter().map(|l| Labeled { logits: l, label: 3 }).collect();
        let others = vec![vec![vec![0.0; 7]; 3], vec![vec![0.0; 7]; 2]];
        let w = LossWeights {
            lambda1: 1.0,
            ..Default::default()
        };
        let t = stage1_loss(&own, &others, &w, UncertaintyVariant::Entropy).unwrap();
        assert_abs_diff_eq!(t.total, 0.0, epsilon = 1e-12);
        let w0 = LossWeights { lambda1: 0.0, ..w };
        let t0 = stage1_loss(&own, &others, &w0, UncertaintyVariant::Entropy).unwrap();
        assert_abs_diff_eq!(t0.total, 7f64.ln(), epsilon = 1e-12);
        assert!(stage1_loss(&own, &[], &w, UncertaintyVariant::Entropy).is_err());
        assert!(stage1_loss(&own, &[vec![]], &w, UncertaintyVariant::Entropy).is_err());
    }

    #[test]
    fn stage1_matches_compositional_oracle() {
        let own_logits = [vec![1.0, -0.5, 0.2], vec![-0.3, 0.8, 0.1]];
        let labels = [0usize, 2];
        let own: Vec<Labeled> = own_logits
            .iter()
            .zip(labels)
            .map(|(l, label)| Labeled { logits: l, label })
            .collect();
        let others = vec![vec![vec![0.4, 0.1, -1.0]], vec![vec![2.0, 0.0, 0.5], vec![-1.0, -1.0, 3.0]]];
        let w = LossWeights {
            lambda1: 0.7,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let got = stage1_loss(&own, &others, &w, UncertaintyVariant::Entropy).unwrap();
        let ce = (ce_oracle(&own_logits[0], 0) + ce_oracle(&own_logits[1], 2)) / 2.0;
        let pooled: Vec<&Vec<f64>> = others.iter().flatten().collect();
        let u = pooled
            .iter()
            .map(|l| {
                let z: f64 = l.iter().map(|v| v.exp()).sum();
                let p: Vec<f64> = l.iter().map(|v| v.exp() / z).collect();
                -entropy_of_probs(&p)
            })
            .sum::<f64>()
            / pooled.len() as f64;
        assert_abs_diff_eq!(got.total, ce + 0.7 * u, epsilon = 1e-10);
    }

    #[test]
    fn stage2_matches_compositional_oracle() {
        let inv = [vec![0.5, -0.2], vec![-1.0, 1.5]];
        let spec = [vec![0.1, 0.3], vec![2.0, -2.0]];
        let mapped = [vec![0.2, 0.4, 0.6], vec![0.9, 0.1, 0.5]];
        let orig = [vec![0.25, 0.4, 0.5], vec![0.8, 0.2, 0.5]];
        let batch: Vec<Stage2Sample> = (0..2)
            .map(|i| Stage2Sample {
                invariant_logits: &inv[i],
                label: i,
                specific_logits: Some(&spec[i]),
                mapped: &mapped[i],
                original: &orig[i],
            })
            .collect();
        let w = LossWeights {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 4.0,
        };
        let got = stage2_loss(&batch, &w, UncertaintyVariant::Entropy, ReconstructionKind::L2).unwrap();
        let ce = (ce_oracle(&inv[0], 0) + ce_oracle(&inv[1], 1)) / 2.0;
        let u = -(0..2)
            .map(|i| {
                let z: f64 = spec[i].iter().map(|v| v.exp()).sum();
                entropy_of_probs(&spec[i].iter().map(|v| v.exp() / z).collect::<Vec<_>>())
            })
            .sum::<f64>()
            / 2.0;
        let mut sq = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                sq += (mapped[i][j] - orig[i][j]).powi(2);
            }
        }
        let r = sq / 6.0;
        assert_abs_diff_eq!(got.total, ce + 0.3 * u + 4.0 * r, epsilon = 1e-10);

        let w0 = LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            ..w
        };
        let t0 = stage2_loss(&batch, &w0, UncertaintyVariant::Entropy, ReconstructionKind::L2).unwrap();
        assert_abs_diff_eq!(t0.total, ce, epsilon = 1e-12);

        let identity: Vec<Stage2Sample> = batch.iter().map(|s| Stage2Sample { mapped: s.original, ..*s }).collect();
        let ti = stage2_loss(&identity, &w, UncertaintyVariant::Entropy, ReconstructionKind::L2).unwrap();
        assert_eq!(ti.reconstruction, 0.0);

        let missing = [Stage2Sample {
            specific_logits: None,
            ..batch[0]
        }];
        assert!(stage2_loss(&missing, &w, UncertaintyVariant::Entropy, ReconstructionKind::L2).is_err());
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!((fd - analytic[i]).abs() / denom < 1e-4 || (fd - analytic[i]).abs() < 1e-9, "component {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 2..10), shift in -50.0f64..50.0) {
            let h = entropy(&logits);
            let c = logits.len() as f64;
            prop_assert!(h >= -1e-12 && h <= c.ln() + 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            prop_assert!((entropy(&shifted) - h).abs() < 1e-9);
        }

        #[test]
        fn uniform_maximizes_entropy(c in 2usize..9, perturb in prop::collection::vec(-1.0f64..1.0, 9)) {
            let uniform = vec![0.0; c];
            let perturbed: Vec<f64> = perturb[..c].iter().map(|p| 0.5 * p).collect();
            prop_assert!(entropy(&perturbed) <= entropy(&uniform) + 1e-12);
        }

        #[test]
        fn least_likely_is_argmin_of_softmax(logits in prop::collection::vec(-10.0f64..10.0, 2..8)) {
            let p = softmax(&logits);
            prop_assert_eq!(least_likely_label(&logits), argmin(&p));
        }

        #[test]
        fn loss_gradients_match_finite_differences(logits in prop::collection::vec(-3.0f64..3.0, 3..7), label in 0usize..3) {
            let (_, g) = cross_entropy_grad(&logits, label).unwrap();
            fd_check(|l| cross_entropy(l, label).unwrap(), &logits, &g);
            let (_, g) = uncertainty_loss_grad(&logits, UncertaintyVariant::Entropy);
            fd_check(|l| uncertainty_loss(l, UncertaintyVariant::Entropy), &logits, &g);
            let (_, g) = uncertainty_loss_grad(&logits, UncertaintyVariant::LeastLikely);
            let fixed = least_likely_label(&logits);
            fd_check(|l| cross_entropy(l, fixed).unwrap(), &logits, &g);
        }

        #[test]
        fn reconstruction_matches_elementwise_oracle(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..64)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mut sq = 0.0;
            let mut ab = 0.0;
            for i in 0..a.len() {
                sq += (a[i] - b[i]) * (a[i] - b[i]);
                ab += (a[i] - b[i]).abs();
            }
            let n = a.len() as f64;
            prop_assert!((reconstruction_loss(&a, &b, ReconstructionKind::L2).unwrap() - sq / n).abs() < 1e-10);
            prop_assert!((reconstruction_loss(&a, &b, ReconstructionKind::L1).unwrap() - ab / n).abs() < 1e-10);
            let (_, g) = reconstruction_loss_grad(&a, &b, ReconstructionKind::L2).unwrap();
            fd_check(|m| reconstruction_loss(m, &b, ReconstructionKind::L2).unwrap(), &a, &g);
        }
    }
}
