//! Two-sample statistics with permutation p-values.
//!
//! Both tests sort the pooled sample once and permute group labels over the
//! sorted positions, so each permutation costs a single linear pass.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::rng::SeededRng;

/// Pooled sample in sorted order with each value's group (`true` = first sample).
struct Pooled {
    values: Vec<f64>,
    groups: Vec<bool>,
    n_a: usize,
}

impl Pooled {
    fn new(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return invalid!("two-sample statistics need non-empty samples");
        }
        if a.iter().chain(b).any(|v| !v.is_finite()) {
            return invalid!("two-sample statistics need finite values");
        }
        let mut pairs: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (values, groups) = pairs.into_iter().unzip();
        Ok(Pooled { values, groups, n_a: a.len() })
    }

    fn ks(&self, groups: &[bool]) -> f64 {
        let n_a = self.n_a as f64;
        let n_b = (self.values.len() - self.n_a) as f64;
        let (mut c_a, mut c_b, mut best) = (0usize, 0usize, 0.0f64);
        for (i, &g) in groups.iter().enumerate() {
            if g {
                c_a += 1;
            } else {
                c_b += 1;
            }
            // only compare where the step functions are defined: after the last tie
            if i + 1 == groups.len() || self.values[i + 1] != self.values[i] {
                best = best.max((c_a as f64 / n_a - c_b as f64 / n_b).abs());
            }
        }
        best
    }

    /// V-statistic energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|`.
    fn energy(&self, groups: &[bool]) -> f64 {
        let n = self.values.len();
        let n_a = self.n_a as f64;
        let n_b = (n - self.n_a) as f64;
        let (mut all, mut aa, mut bb) = (0.0, 0.0, 0.0);
        let (mut r_a, mut r_b) = (0.0, 0.0);
        for (k, (&z, &g)) in self.values.iter().zip(groups).enumerate() {
            all += z * (2.0 * k as f64 - n as f64 + 1.0);
            if g {
                aa += z * (2.0 * r_a - n_a + 1.0);
                r_a += 1.0;
            } else {
                bb += z * (2.0 * r_b - n_b + 1.0);
                r_b += 1.0;
            }
        }
        let ab = all - aa - bb;
        2.0 * ab / (n_a * n_b) - 2.0 * aa / (n_a * n_a) - 2.0 * bb / (n_b * n_b)
    }
}

/// Permutation p-value `(1 + #{perm >= observed}) / (1 + permutations)`.
fn p_value(exceed: usize, permutations: usize) -> f64 {
    (1 + exceed) as f64 / (1 + permutations) as f64
}

/// Kolmogorov–Smirnov distance between two empirical distributions.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    let pooled = Pooled::new(a, b)?;
    Ok(pooled.ks(&pooled.groups))
}

/// KS statistic and its permutation p-value.
pub fn ks_permutation_test(a: &[f64], b: &[f64], permutations: usize, rng: &mut SeededRng) -> Result<(f64, f64)> {
    let pooled = Pooled::new(a, b)?;
    let observed = pooled.ks(&pooled.groups);
    let mut groups = pooled.groups.clone();
    let mut exceed = 0;
    for _ in 0..permutations {
        groups.shuffle(rng);
        // tolerance guards against ties in floating-point ratios
        if pooled.ks(&groups) >= observed - 1e-12 {
            exceed += 1;
        }
    }
    Ok((observed, p_value(exceed, permutations)))
}

/// One-sample KS distance `sup |F_n - F|` against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sample.is_empty() || sample.iter().any(|v| !v.is_finite()) {
        return invalid!("one-sample KS needs a non-empty finite sample");
    }
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max))
}

/// Asymptotic p-value of a one-sample KS distance `d` at sample size `n`,
/// with the Stephens small-sample correction.
pub fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-dimensional energy distance.
pub fn energy_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let pooled = Pooled::new(a, b)?;
    Ok(pooled.energy(&pooled.groups))
}

/// Sliced energy distance between two samples of vectors: the mean of the
/// one-dimensional energy distances along `projections` random directions,
/// with a permutation p-value that relabels all projections jointly.
pub fn sliced_energy_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    projections: usize,
    permutations: usize,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    let Some(dim) = a.first().map(Vec::len) else {
        return invalid!("two-sample statistics need non-empty samples");
    };
    if projections == 0 {
        return invalid!("sliced energy test needs at least one projection");
    }
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return invalid!("all vectors must have dimension {dim}");
    }
    let n_a = a.len();
    // per projection: sorted pooled values and the pooled index at each sorted position
    let mut sorted: Vec<(Pooled, Vec<usize>)> = Vec::with_capacity(projections);
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let proj = |v: &Vec<f64>| v.iter().zip(&dir).map(|(x, d)| x * d).sum::<f64>();
        let pa: Vec<f64> = a.iter().map(proj).collect();
        let pb: Vec<f64> = b.iter().map(proj).collect();
        let mut idx: Vec<usize> = (0..pa.len() + pb.len()).collect();
        let value = |i: usize| if i < n_a { pa[i] } else { pb[i - n_a] };
        idx.sort_by(|&x, &y| value(x).total_cmp(&value(y)));
        sorted.push((Pooled::new(&pa, &pb)?, idx));
    }
    let statistic = |labels: &[bool]| -> f64 {
        let mut groups = vec![false; labels.len()];
        sorted
            .iter()
            .map(|(pooled, idx)| {
                for (g, &i) in groups.iter_mut().zip(idx) {
                    *g = labels[i];
                }
                pooled.energy(&groups)
            })
            .sum::<f64>()
            / projections as f64
    };
    let mut labels: Vec<bool> = (0..a.len() + b.len()).map(|i| i < n_a).collect();
    let observed = statistic(&labels);
    let mut exceed = 0;
    for _ in 0..permutations {
        labels.shuffle(rng);
        if statistic(&labels) >= observed - 1e-12 {
            exceed += 1;
        }
    }
    Ok((observed, p_value(exceed, permutations)))
}
