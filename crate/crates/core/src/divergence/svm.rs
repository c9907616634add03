//! Linear SVM trained by primal subgradient descent on the L2-regularized
//! hinge loss (Pegasos step schedule).

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub const SVM_EPOCHS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }

    /// Fraction of misclassified points.
    pub fn error(&self, features: &[Vec<f64>], labels: &[bool]) -> f64 {
        let wrong = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) != y).count();
        wrong as f64 / features.len().max(1) as f64
    }
}

/// Minimizes `reg/2 (|w|^2 + b^2) + mean_i max(0, 1 - y_i (w.x_i + b))`,
/// the bias being a weight on a constant unit feature. Visiting order is reshuffled every epoch from
/// `seed`.
pub fn train_linear_svm(features: &[Vec<f64>], labels: &[bool], reg: f64, seed: u64) -> Result<LinearSvm> {
    if features.len() != labels.len() {
        return Err(Error::shape(features.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Precondition("svm needs samples from both classes".into()));
    }
    if !(reg.is_finite() && reg > 0.0) {
        return Err(Error::Config(format!("svm regularization must be positive, got {reg}")));
    }
    let dim = features[0].len();
    if features.iter().any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Precondition("svm features must be finite and of equal length".into()));
    }
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut t = 0usize;
    // Average of the final epoch's iterates; the last Pegasos iterate is noisy.
    let mut w_avg = vec![0.0; dim];
    let mut b_avg = 0.0;
    for epoch in 0..SVM_EPOCHS {
        order.shuffle(&mut rng::stream(seed, "svm", &[epoch as u64]));
        let last = epoch + 1 == SVM_EPOCHS;
        for &i in &order {
            t += 1;
            let eta = 1.0 / (reg * t as f64);
            let y = if labels[i] { 1.0 } else { -1.0 };
            let x = &features[i];
            let margin = y * (w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b);
            let shrink = 1.0 - eta * reg;
            w.iter_mut().for_each(|a| *a *= shrink);
            b *= shrink;
            if margin < 1.0 {
                w.iter_mut().zip(x).for_each(|(a, v)| *a += eta * y * v);
                b += eta * y;
            }
            if last {
                w_avg.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                b_avg += b;
            }
        }
    }
    let n = features.len() as f64;
    Ok(LinearSvm {
        weights: w_avg.into_iter().map(|v| v / n).collect(),
        bias: b_avg / n,
    })
}

/// Per-dimension mean and standard deviation; constant dimensions get unit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Self {
        let dim = features.first().map_or(0, Vec::len);
        let n = features.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for x in features {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for x in features {
            var.iter_mut().zip(x).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
        }
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Exact soft-margin SVM on the same augmented objective, by dual
    /// coordinate descent run to a tight tolerance.
    fn exact_svm(x: &[Vec<f64>], y: &[bool], c: f64) -> LinearSvm {
        let aug: Vec<Vec<f64>> = x.iter().map(|v| v.iter().copied().chain([1.0]).collect()).collect();
        let ys: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let mut alpha = vec![0.0; x.len()];
        let mut w = vec![0.0; aug[0].len()];
        for _ in 0..20_000 {
            let mut change: f64 = 0.0;
            for i in 0..aug.len() {
                let q: f64 = aug[i].iter().map(|v| v * v).sum();
                let g = ys[i] * w.iter().zip(&aug[i]).map(|(a, b)| a * b).sum::<f64>() - 1.0;
                let new = (alpha[i] - g / q).clamp(0.0, c);
                let d = new - alpha[i];
                if d != 0.0 {
                    w.iter_mut().zip(&aug[i]).for_each(|(a, v)| *a += d * ys[i] * v);
                    alpha[i] = new;
                    change = change.max(d.abs());
                }
            }
            if change < 1e-12 {
                break;
            }
        }
        let bias = w.pop().unwrap();
        LinearSvm { weights: w, bias }
    }

    fn margin_set(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut r = rng::stream(seed, "test-margin", &[]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        while x.len() < n {
            let p: [f64; 2] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let s = 0.8 * p[0] - 0.6 * p[1] + 0.1;
            if s.abs() < 0.15 {
                continue;
            }
            x.push(p.to_vec());
            y.push(s > 0.0);
        }
        (x, y)
    }

    #[test]
    fn two_points_are_separated() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let svm = train_linear_svm(&x, &[true, false], 0.01, 0).unwrap();
        assert_eq!(svm.error(&x, &[true, false]), 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(train_linear_svm(&x, &[true, true], 0.1, 0).is_err());
    }

    #[test]
    fn matches_exact_solver_on_margin_set() {
        let (x, y) = margin_set(100, 1);
        let (tx, ty) = margin_set(400, 2);
        for reg in [1e-3, 1e-2, 1e-1] {
            let svm = train_linear_svm(&x, &y, reg, 5).unwrap();
            // reg/2 |w|^2 + mean hinge  <=>  1/2 |w|^2 + C sum hinge with C = 1/(n reg)
            let exact = exact_svm(&x, &y, 1.0 / (x.len() as f64 * reg));
            let (a, b) = (svm.error(&tx, &ty), exact.error(&tx, &ty));
            assert!((a - b).abs() <= 0.02, "reg {reg}: subgradient {a} vs exact {b}");
        }
    }

    #[test]
    fn noise_labels_give_chance_error() {
        let mut r = rng::stream(3, "test-noise", &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<bool>) {
            (0..n)
                .map(|_| ((0..5).map(|_| normal.sample(&mut r)).collect(), r.gen_bool(0.5)))
                .unzip()
        };
        let (x, y) = draw(1000);
        let (tx, ty) = draw(2000);
        let err = train_linear_svm(&x, &y, 0.1, 1).unwrap().error(&tx, &ty);
        assert!((err - 0.5).abs() <= 0.05, "{err}");
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let x = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]];
        let s = Standardizer::fit(&x);
        let z: Vec<Vec<f64>> = x.iter().map(|v| s.apply(v)).collect();
        let mean: f64 = z.iter().map(|v| v[0]).sum::<f64>() / 3.0;
        let var: f64 = z.iter().map(|v| v[0] * v[0]).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|v| v[1] == 0.0));
    }
}
