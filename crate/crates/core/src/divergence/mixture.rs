//! Mixtures of source domains on a grid of tenths.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Mixing weights in integer tenths; always sums to exactly 10.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MixtureSpec {
    weights: Vec<u32>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<u32>) -> Result<Self> {
        if weights.is_empty() || weights.iter().sum::<u32>() != 10 {
            return Err(Error::Config(format!("mixture weights {weights:?} must sum to 10 tenths")));
        }
        Ok(MixtureSpec { weights })
    }

    pub fn tenths(&self) -> &[u32] {
        &self.weights
    }

    pub fn pi(&self) -> Vec<f64> {
        self.weights.iter().map(|&w| f64::from(w) / 10.0).collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Per-domain sample counts for `total` samples, rounded by largest
    /// remainder (ties to the lower index) so they sum to `total` exactly.
    pub fn counts(&self, total: usize) -> Vec<usize> {
        let exact: Vec<(usize, usize)> = self
            .weights
            .iter()
            .map(|&w| {
                let scaled = w as usize * total;
                (scaled / 10, scaled % 10)
            })
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.0).collect();
        let leftover = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
        for &i in order.iter().take(leftover) {
            counts[i] += 1;
        }
        counts
    }
}

impl fmt::Display for MixtureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.weights.iter().map(|&w| format!("{:.1}", f64::from(w) / 10.0)).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Every way to split 10 tenths over `n` domains in multiples of
/// `step_tenths`, in lexicographic order.
pub fn enumerate_mixtures(n: usize, step_tenths: u32) -> Result<Vec<MixtureSpec>> {
    if n == 0 {
        return Err(Error::Config("mixtures need at least one domain".into()));
    }
    if step_tenths == 0 || 10 % step_tenths != 0 {
        return Err(Error::Config(format!("mixture step {step_tenths} must divide 10")));
    }
    fn fill(prefix: &mut Vec<u32>, left: u32, slots: usize, step: u32, out: &mut Vec<MixtureSpec>) {
        if slots == 1 {
            prefix.push(left);
            out.push(MixtureSpec { weights: prefix.clone() });
            prefix.pop();
            return;
        }
        let mut w = 0;
        while w <= left {
            prefix.push(w);
            fill(prefix, left - w, slots - 1, step, out);
            prefix.pop();
            w += step;
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::new(), 10, n, step_tenths, &mut out);
    Ok(out)
}

/// Draws `total` items, `counts(total)[i]` of them from `sources[i]`.
/// Draws are without replacement unless a source is too small, in which case
/// that source is sampled with replacement and a warning is logged.
pub fn sample_mixture<T: Clone>(spec: &MixtureSpec, sources: &[&[T]], total: usize, seed: u64) -> Result<Vec<T>> {
    if spec.len() != sources.len() {
        return Err(Error::shape(spec.len(), sources.len()));
    }
    let mut out = Vec::with_capacity(total);
    for (i, (&count, source)) in spec.counts(total).iter().zip(sources).enumerate() {
        if count == 0 {
            continue;
        }
        if source.is_empty() {
            return Err(Error::Precondition(format!("mixture source {i} is empty")));
        }
        let mut r = rng::stream(seed, "mixture", &[i as u64]);
        if count <= source.len() {
            out.extend(index::sample(&mut r, source.len(), count).into_iter().map(|j| source[j].clone()));
        } else {
            log::warn!(
                "mixture source {i} has {} samples but {count} are needed; sampling with replacement",
                source.len()
            );
            out.extend((0..count).map(|_| source[r.gen_range(0..source.len())].clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binomial(n: u64, k: u64) -> u64 {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn enumeration_matches_exhaustive_oracle() {
        assert_eq!(enumerate_mixtures(1, 1).unwrap(), vec![MixtureSpec::new(vec![10]).unwrap()]);
        assert_eq!(enumerate_mixtures(2, 1).unwrap().len(), 11);
        let mut oracle = Vec::new();
        for a in 0..=10u32 {
            for b in 0..=10u32 {
                for c in 0..=10u32 {
                    if a + b + c == 10 {
                        oracle.push(vec![a, b, c]);
                    }
                }
            }
        }
        let got: Vec<Vec<u32>> = enumerate_mixtures(3, 1).unwrap().iter().map(|m| m.tenths().to_vec()).collect();
        assert_eq!(got.len(), 66);
        assert_eq!(got, oracle);
        assert!(enumerate_mixtures(0, 1).is_err());
        assert!(enumerate_mixtures(2, 3).is_err());
        assert_eq!(enumerate_mixtures(3, 5).unwrap().len(), 6);
    }

    #[test]
    fn largest_remainder_counts() {
        let m = |w: Vec<u32>| MixtureSpec::new(w).unwrap();
        assert_eq!(m(vec![0, 10, 0]).counts(50), vec![0, 50, 0]);
        assert_eq!(m(vec![2, 8, 0]).counts(50), vec![10, 40, 0]);
        assert_eq!(m(vec![3, 3, 4]).counts(10), vec![3, 3, 4]);
        // quotas 3.3 / 3.3 / 4.4: the spare unit goes to the largest remainder
        assert_eq!(m(vec![3, 3, 4]).counts(11), vec![3, 3, 5]);
        // quotas 1.5 / 1.5 / 2: tied remainders favour the lower index
        assert_eq!(m(vec![3, 3, 4]).counts(5), vec![2, 1, 2]);
        assert!(MixtureSpec::new(vec![5, 4]).is_err());
    }

    #[test]
    fn sampling_respects_counts_and_falls_back() {
        let a: Vec<u32> = (0..20).collect();
        let b: Vec<u32> = (100..103).collect();
        let spec = MixtureSpec::new(vec![4, 6]).unwrap();
        let drawn = sample_mixture(&spec, &[&a, &b], 10, 1).unwrap();
        assert_eq!(drawn.len(), 10);
        let from_a: Vec<u32> = drawn.iter().copied().filter(|&v| v < 100).collect();
        assert_eq!(from_a.len(), 4);
        let mut uniq = from_a.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
        assert_eq!(drawn, sample_mixture(&spec, &[&a, &b], 10, 1).unwrap());
    }

    proptest! {
        #[test]
        fn enumeration_count_and_sums(n in 1usize..5) {
            let all = enumerate_mixtures(n, 1).unwrap();
            prop_assert_eq!(all.len() as u64, binomial(n as u64 + 9, n as u64 - 1));
            prop_assert!(all.iter().all(|m| m.tenths().iter().sum::<u32>() == 10));
            prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn counts_sum_to_total(w in proptest::collection::vec(0u32..=10, 1..5), total in 0usize..500) {
            let s: u32 = w.iter().sum();
            prop_assume!(s > 0);
            let mut w = w;
            // rescale to a valid spec: dump the remainder on the last slot
            let mut acc = 0;
            for v in w.iter_mut() {
                *v = (*v * 10 / s).min(10 - acc);
                acc += *v;
            }
            *w.last_mut().unwrap() += 10 - acc;
            let spec = MixtureSpec::new(w).unwrap();
            let counts = spec.counts(total);
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            for (c, p) in counts.iter().zip(spec.pi()) {
                prop_assert!((*c as f64 - p * total as f64).abs() < 1.0);
            }
        }
    }
}
