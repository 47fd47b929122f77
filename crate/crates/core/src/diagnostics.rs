//! Monte Carlo checks of the distributional properties of the weight laws and
//! of the robustness of the posterior bootstrap under misspecification.

use std::path::Path;

use nalgebra::{DMatrix, Matrix2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{
    dirichlet_allowing_zeros, draw_weights_decomposed, log_gamma_unchecked, random_assignment, sample_v_n,
};
use crate::error::{invalid, NptlError, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from_seed, stream, stream_seed, SeededRng};
use crate::sampler::{weighted_least_squares, DrawScheme};
use crate::stats::{ks_permutation_test, sliced_energy_test};

pub const DEFAULT_PERMUTATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and variance of the weighted mean `sum w_i z_i / sum w_i` over data
/// values and pseudo values under a weight law, in closed form.
///
/// Blocked laws average over the random partition as well as the Dirichlet
/// draw; both sides use the block sizes of [`crate::dirichlet::make_block_mapping`].
pub fn weighted_mean_moments(data: &[f64], pseudo: &[f64], alpha: f64, scheme: DrawScheme) -> Result<Moments> {
    let n = data.len();
    if n == 0 {
        return invalid!("weighted mean moments need data");
    }
    if pseudo.len() != n {
        return invalid!("pseudo values ({}) must match data values ({n})", pseudo.len());
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return invalid!("alpha must be a finite non-negative number, got {alpha}");
    }
    let nf = n as f64;
    let c = alpha / nf;
    match scheme {
        DrawScheme::NonBlocked => {
            let a0 = nf + alpha;
            let m1 = (data.iter().sum::<f64>() + c * pseudo.iter().sum::<f64>()) / a0;
            let m2 = (data.iter().map(|z| z * z).sum::<f64>() + c * pseudo.iter().map(|z| z * z).sum::<f64>()) / a0;
            Ok(Moments { mean: m1, variance: ((m2 - m1 * m1) / (a0 + 1.0)).max(0.0) })
        }
        DrawScheme::Blocked { blocks } => {
            if blocks == 0 || blocks > n {
                return invalid!("block count {blocks} must lie in 1..={n}");
            }
            let l = blocks as f64;
            let sizes: Vec<f64> = (0..blocks).map(|b| (n / blocks + usize::from(b < n % blocks)) as f64).collect();
            let a0 = l * (1.0 + c);
            let (mean_d, var_d) = population_moments(data);
            let (mean_p, var_p) = population_moments(pseudo);

            let mean = l * (mean_d + c * mean_p) / a0;
            // sum over blocks of the block means is a linear permutation statistic
            let c_bar = l / nf;
            let spread: f64 = sizes.iter().map(|s| s * (1.0 / s - c_bar).powi(2)).sum();
            let perm_var = |var: f64| if n > 1 { nf * var * spread / (nf - 1.0) } else { 0.0 };
            let var_of_cond_mean = (perm_var(var_d) + c * c * perm_var(var_p)) / (a0 * a0);
            // E[m_l^2] for a block of size s drawn without replacement
            let second = |mean: f64, var: f64| -> f64 {
                sizes
                    .iter()
                    .map(|s| mean * mean + if n > 1 { var * (nf - s) / (s * (nf - 1.0)) } else { 0.0 })
                    .sum()
            };
            let weighted_second = second(mean_d, var_d) + c * second(mean_p, var_p);
            let cond_var = (weighted_second / a0 - (mean * mean + var_of_cond_mean)) / (a0 + 1.0);
            Ok(Moments { mean, variance: (cond_var + var_of_cond_mean).max(0.0) })
        }
    }
}

/// Mean and population variance.
fn population_moments(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    (mean, z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// Bounded test function applied to each atom before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    Identity,
    Step { threshold: f64 },
    Cosine { frequency: f64 },
    Constant { value: f64 },
}

impl TestFunction {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            TestFunction::Identity => x,
            TestFunction::Step { threshold } => f64::from(u8::from(x <= threshold)),
            TestFunction::Cosine { frequency } => (2.0 * std::f64::consts::PI * frequency * x).cos(),
            TestFunction::Constant { value } => value,
        }
    }

    pub fn name(self) -> String {
        match self {
            TestFunction::Identity => "identity".into(),
            TestFunction::Step { threshold } => format!("step({threshold})"),
            TestFunction::Cosine { frequency } => format!("cosine({frequency})"),
            TestFunction::Constant { value } => format!("constant({value})"),
        }
    }

    pub fn default_family() -> Vec<TestFunction> {
        vec![TestFunction::Identity, TestFunction::Step { threshold: 0.5 }, TestFunction::Cosine { frequency: 1.0 }]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockedTestConfig {
    pub n: usize,
    pub blocks: usize,
    pub alpha: f64,
    pub draws: usize,
    pub permutations: usize,
    /// Block the pseudo atoms too (the sampler's law); otherwise the `n`
    /// pseudo atoms stay individual Dirichlet coordinates.
    pub block_pseudo: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleReport {
    pub functional: String,
    pub statistic_name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub size_a: usize,
    pub size_b: usize,
    pub n: usize,
    pub blocks: usize,
    pub alpha: f64,
    pub pseudo_atoms: usize,
    pub block_pseudo: bool,
    pub seed: u64,
}

/// Normalized weights of one blocked draw; pseudo atoms optionally unblocked.
fn blocked_simplex(n: usize, blocks: usize, alpha: f64, block_pseudo: bool, rng: &mut SeededRng) -> Vec<f64> {
    let c = alpha / n as f64;
    let train_assign = random_assignment(n, blocks, rng);
    let train_sizes = counts(&train_assign, blocks);
    let mut out = Vec::with_capacity(2 * n);
    if block_pseudo {
        let pseudo_assign = random_assignment(n, blocks, rng);
        let pseudo_sizes = counts(&pseudo_assign, blocks);
        let mut conc = vec![1.0; blocks];
        conc.extend(std::iter::repeat_n(c, blocks));
        let (p, _) = dirichlet_allowing_zeros(&conc, rng);
        out.extend(train_assign.iter().map(|&b| p[b] / train_sizes[b]));
        out.extend(pseudo_assign.iter().map(|&b| p[blocks + b] / pseudo_sizes[b]));
    } else {
        let mut conc = vec![1.0; blocks];
        conc.extend(std::iter::repeat_n(c, n));
        let (p, _) = dirichlet_allowing_zeros(&conc, rng);
        out.extend(train_assign.iter().map(|&b| p[b] / train_sizes[b]));
        out.extend_from_slice(&p[blocks..]);
    }
    out
}

fn counts(assign: &[usize], blocks: usize) -> Vec<f64> {
    let mut sizes = vec![0.0; blocks];
    for &b in assign {
        sizes[b] += 1.0;
    }
    sizes
}

fn nonblocked_simplex(n: usize, alpha: f64, rng: &mut SeededRng) -> Vec<f64> {
    let mut conc = vec![1.0; n];
    conc.extend(std::iter::repeat_n(alpha / n as f64, n));
    dirichlet_allowing_zeros(&conc, rng).0
}

/// Compares the blocked and the non-blocked law of weighted-mean functionals
/// `sum_i p_i f(x_i)` on one fixed dataset of uniform atoms, with a KS
/// permutation test per functional.
pub fn blocked_vs_nonblocked_test(config: &BlockedTestConfig, functionals: &[TestFunction]) -> Result<Vec<TwoSampleReport>> {
    let BlockedTestConfig { n, blocks, alpha, draws, permutations, block_pseudo, seed } = *config;
    if draws < 2 || n == 0 || blocks == 0 || blocks > n {
        return invalid!("blocked test needs draws >= 2 and 1 <= blocks <= n (got draws={draws}, n={n}, blocks={blocks})");
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return invalid!("alpha must be a finite non-negative number, got {alpha}");
    }
    if functionals.is_empty() {
        return invalid!("no test functions given");
    }
    let mut data_rng = rng_from_seed(stream_seed(seed, stream::DIAGNOSTIC, 0));
    let atoms: Vec<f64> = (0..2 * n).map(|_| data_rng.random::<f64>()).collect();
    let values: Vec<Vec<f64>> = functionals.iter().map(|f| atoms.iter().map(|&x| f.apply(x)).collect()).collect();

    let sample = |law: u64, draw: &(dyn Fn(&mut SeededRng) -> Vec<f64> + Sync)| -> Vec<Vec<f64>> {
        let base = stream_seed(seed, stream::DIAGNOSTIC, law);
        let per_draw: Vec<Vec<f64>> = (0..draws)
            .into_par_iter()
            .map(|d| {
                let p = draw(&mut rng_from_seed(derive_seed(base, d as u64)));
                // centering keeps constant functionals exactly constant
                values.iter().map(|v| v[0] + p.iter().zip(v).map(|(w, z)| w * (z - v[0])).sum::<f64>()).collect()
            })
            .collect();
        // transpose to one sample per functional
        (0..functionals.len()).map(|f| per_draw.iter().map(|row| row[f]).collect()).collect()
    };
    let blocked = sample(1, &|rng| blocked_simplex(n, blocks, alpha, block_pseudo, rng));
    let plain = sample(2, &|rng| nonblocked_simplex(n, alpha, rng));

    functionals
        .iter()
        .enumerate()
        .map(|(f, func)| {
            let mut rng = rng_from_seed(stream_seed(seed, stream::DIAGNOSTIC, 3 + f as u64));
            let (statistic, p_value) = ks_permutation_test(&blocked[f], &plain[f], permutations, &mut rng)?;
            Ok(TwoSampleReport {
                functional: func.name(),
                statistic_name: "ks".into(),
                statistic,
                p_value,
                size_a: draws,
                size_b: draws,
                n,
                blocks,
                alpha,
                pseudo_atoms: n,
                block_pseudo,
                seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTestConfig {
    pub n: usize,
    pub pseudo_atoms: usize,
    pub alpha: f64,
    pub blocks: usize,
    pub draws: usize,
    pub projections: usize,
    pub permutations: usize,
    pub seed: u64,
}

/// Direct draw of the blocked law with `T` unblocked pseudo atoms: every data
/// point carries its block's `Ga(1)` variate, every pseudo atom its own
/// `Ga(alpha/T)` variate, and the vector is normalized.
pub fn direct_blocked_simplex(n: usize, pseudo_atoms: usize, alpha: f64, blocks: usize, rng: &mut SeededRng) -> Vec<f64> {
    let assign = random_assignment(n, blocks, rng);
    let g: Vec<f64> = (0..blocks).map(|_| log_gamma_unchecked(1.0, rng)).collect();
    let mut logs: Vec<f64> = assign.iter().map(|&b| g[b]).collect();
    let shape = alpha / pseudo_atoms as f64;
    logs.extend((0..pseudo_atoms).map(|_| if shape > 0.0 { log_gamma_unchecked(shape, rng) } else { f64::NEG_INFINITY }));
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Sliced energy-distance permutation test of the decomposed construction
/// against direct draws of the same law.
pub fn decomposition_test(config: &DecompositionTestConfig) -> Result<TwoSampleReport> {
    let DecompositionTestConfig { n, pseudo_atoms, alpha, blocks, draws, projections, permutations, seed } = *config;
    if draws < 2 {
        return invalid!("decomposition test needs at least two draws");
    }
    let composed_base = stream_seed(seed, stream::DIAGNOSTIC, 10);
    let direct_base = stream_seed(seed, stream::DIAGNOSTIC, 11);
    let composed = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = rng_from_seed(derive_seed(composed_base, d as u64));
            draw_weights_decomposed(n, pseudo_atoms, alpha, blocks, &mut rng).map(|dd| dd.composed())
        })
        .collect::<Result<Vec<_>>>()?;
    let direct: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|d| direct_blocked_simplex(n, pseudo_atoms, alpha, blocks, &mut rng_from_seed(derive_seed(direct_base, d as u64))))
        .collect();
    let mut rng = rng_from_seed(stream_seed(seed, stream::DIAGNOSTIC, 12));
    let (statistic, p_value) = sliced_energy_test(&composed, &direct, projections, permutations, &mut rng)?;
    Ok(TwoSampleReport {
        functional: "weight-vector".into(),
        statistic_name: "sliced-energy".into(),
        statistic,
        p_value,
        size_a: draws,
        size_b: draws,
        n,
        blocks,
        alpha,
        pseudo_atoms,
        block_pseudo: false,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnReport {
    pub n: usize,
    pub blocks: usize,
    pub alpha: f64,
    pub draws: usize,
    pub mean: f64,
    pub std_error: f64,
    /// `alpha / n`.
    pub bound: f64,
    /// `mean <= bound + 3 * std_error`.
    pub within_bound: bool,
    pub seed: u64,
}

/// Monte Carlo mean of the prior-mass fraction `V_n = G / (G + H_n)` against `alpha / n`.
pub fn vn_bound_check(n: usize, blocks: usize, alpha: f64, draws: usize, seed: u64) -> Result<VnReport> {
    if n == 0 || blocks == 0 || blocks > n || draws < 2 {
        return invalid!("V_n check needs 1 <= blocks <= n and draws >= 2");
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return invalid!("alpha must be a finite non-negative number, got {alpha}");
    }
    let base = stream_seed(seed, stream::DIAGNOSTIC, 20);
    let chunks = 64usize;
    let per_chunk: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(base, c as u64));
            let count = draws / chunks + usize::from(c < draws % chunks);
            (0..count).fold((0.0, 0.0), |(s, s2), _| {
                let v = sample_v_n(n, blocks, alpha, &mut rng);
                (s + v, s2 + v * v)
            })
        })
        .collect();
    let (sum, sum2) = per_chunk.iter().fold((0.0, 0.0), |(a, b), (s, s2)| (a + s, b + s2));
    let d = draws as f64;
    let mean = sum / d;
    let var = ((sum2 - d * mean * mean) / (d - 1.0)).max(0.0);
    let std_error = (var / d).sqrt();
    let bound = alpha / n as f64;
    Ok(VnReport { n, blocks, alpha, draws, mean, std_error, bound, within_bound: mean <= bound + 3.0 * std_error, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichConfig {
    pub n: usize,
    pub samples: usize,
    /// Noise scale `0.5 + |x|` instead of 1.
    pub heteroscedastic: bool,
    /// Prior variance of each coefficient in the conjugate model.
    pub prior_variance: f64,
    pub seed: u64,
}

/// Covariances of `(slope, intercept)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub config: SandwichConfig,
    pub npl: [[f64; 2]; 2],
    pub sandwich: [[f64; 2]; 2],
    pub parametric: [[f64; 2]; 2],
    pub slope_var_npl: f64,
    pub slope_var_sandwich: f64,
    pub slope_var_parametric: f64,
    /// `|npl - sandwich| / sandwich` on the slope variance.
    pub dev_npl_sandwich: f64,
    /// `|npl - parametric| / parametric` on the slope variance.
    pub dev_npl_parametric: f64,
    /// `|sandwich - parametric| / parametric` on the slope variance.
    pub dev_sandwich_parametric: f64,
}

/// Regression data `y = 1 + 2x + s(x) e` with standard normal `x` and `e`.
pub fn regression_task(n: usize, heteroscedastic: bool, rng: &mut SeededRng) -> (Matrix, Vec<f64>) {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        let scale = if heteroscedastic { 0.5 + xi.abs() } else { 1.0 };
        x.push(xi);
        y.push(1.0 + 2.0 * xi + scale * e);
    }
    (Matrix::from_vec(n, 1, x).expect("n x 1"), y)
}

fn to_array(m: &Matrix2<f64>) -> [[f64; 2]; 2] {
    let s = 0.5 * (m + m.transpose());
    [[s[(0, 0)], s[(0, 1)]], [s[(1, 0)], s[(1, 1)]]]
}

/// Posterior bootstrap (`alpha = 0`) covariance of a homoscedastic linear fit
/// against the sandwich and the conjugate-posterior covariances.
pub fn sandwich_check(config: &SandwichConfig) -> Result<CovarianceReport> {
    let SandwichConfig { n, samples, heteroscedastic, prior_variance, seed } = *config;
    if n < 3 || samples < 2 {
        return invalid!("sandwich check needs n >= 3 and at least two samples");
    }
    if !(prior_variance > 0.0) {
        return invalid!("prior variance must be positive");
    }
    let (x, y) = regression_task(n, heteroscedastic, &mut rng_from_seed(stream_seed(seed, stream::DIAGNOSTIC, 30)));
    let beta = weighted_least_squares(&x, &y, &vec![1.0; n])?;
    let mut gram = Matrix2::zeros();
    let mut meat = Matrix2::zeros();
    let mut rss = 0.0;
    for (i, &yi) in y.iter().enumerate().take(n) {
        let z = nalgebra::Vector2::new(x.get(i, 0), 1.0);
        let e = yi - beta[0] * z[0] - beta[1];
        gram += z * z.transpose();
        meat += e * e * z * z.transpose();
        rss += e * e;
    }
    let Some(bread) = gram.try_inverse() else {
        return invalid!("regression design is singular");
    };
    let sandwich = bread * meat * bread;
    let sigma2 = rss / (n - 2) as f64;
    let parametric = (gram + Matrix2::identity() * (sigma2 / prior_variance))
        .try_inverse()
        .map(|m| m * sigma2)
        .ok_or_else(|| NptlError::InvalidArgument("conjugate precision is singular".into()))?;

    let base = stream_seed(seed, stream::DIAGNOSTIC, 31);
    let fits = (0..samples)
        .into_par_iter()
        .map(|m| {
            let mut rng = rng_from_seed(derive_seed(base, m as u64));
            let (w, _) = dirichlet_allowing_zeros(&vec![1.0; n], &mut rng);
            weighted_least_squares(&x, &y, &w)
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = DMatrix::from_fn(samples, 2, |r, c| fits[r][c]);
    let means = draws.row_mean();
    let mut npl = Matrix2::zeros();
    for r in 0..samples {
        let d = nalgebra::Vector2::new(draws[(r, 0)] - means[0], draws[(r, 1)] - means[1]);
        npl += d * d.transpose();
    }
    npl /= (samples - 1) as f64;

    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (sv_n, sv_s, sv_p) = (npl[(0, 0)], sandwich[(0, 0)], parametric[(0, 0)]);
    Ok(CovarianceReport {
        config: *config,
        npl: to_array(&npl),
        sandwich: to_array(&sandwich),
        parametric: to_array(&parametric),
        slope_var_npl: sv_n,
        slope_var_sandwich: sv_s,
        slope_var_parametric: sv_p,
        dev_npl_sandwich: rel(sv_n, sv_s),
        dev_npl_parametric: rel(sv_n, sv_p),
        dev_sandwich_parametric: rel(sv_s, sv_p),
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| NptlError::io(path, e))
}

/// One CSV row per record.
pub fn write_csv_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| NptlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments_mc(data: &[f64], pseudo: &[f64], alpha: f64, scheme: DrawScheme, draws: usize) -> (f64, f64, f64, f64) {
        let n = data.len();
        let vals: Vec<f64> = (0..draws)
            .into_par_iter()
            .map(|d| {
                let mut rng = rng_from_seed(derive_seed(99, d as u64));
                let draw = scheme.draw(n, alpha, &mut rng).unwrap();
                let total = draw.total();
                (draw.w.iter().zip(data).map(|(w, z)| w * z).sum::<f64>()
                    + draw.w_tilde.iter().zip(pseudo).map(|(w, z)| w * z).sum::<f64>())
                    / total
            })
            .collect();
        let m = vals.iter().sum::<f64>() / draws as f64;
        let centered: Vec<f64> = vals.iter().map(|v| (v - m).powi(2)).collect();
        let var = centered.iter().sum::<f64>() / (draws - 1) as f64;
        let m4 = centered.iter().map(|c| c * c).sum::<f64>() / draws as f64;
        let se_mean = (var / draws as f64).sqrt();
        let se_var = ((m4 - var * var) / draws as f64).sqrt();
        (m, var, se_mean, se_var)
    }

    fn toy_values(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let data = (0..n).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
        let pseudo = (0..n).map(|_| rng.random::<f64>() + 2.0).collect();
        (data, pseudo)
    }

    #[test]
    fn moments_trivial_cases() {
        let (data, pseudo) = toy_values(50, 1);
        let m = weighted_mean_moments(&data, &pseudo, 0.0, DrawScheme::NonBlocked).unwrap();
        let mean = data.iter().sum::<f64>() / 50.0;
        assert!((m.mean - mean).abs() < 1e-12);
        let m = weighted_mean_moments(&data, &pseudo, 0.0, DrawScheme::Blocked { blocks: 10 }).unwrap();
        assert!((m.mean - mean).abs() < 1e-12);
        for scheme in [DrawScheme::NonBlocked, DrawScheme::Blocked { blocks: 7 }] {
            let m = weighted_mean_moments(&[2.5; 30], &[2.5; 30], 3.0, scheme).unwrap();
            assert!((m.mean - 2.5).abs() < 1e-12 && m.variance.abs() < 1e-12, "{m:?}");
        }
        assert!(weighted_mean_moments(&data, &pseudo, -1.0, DrawScheme::NonBlocked).is_err());
        // one item per block is the non-blocked law
        let a = weighted_mean_moments(&data, &pseudo, 2.0, DrawScheme::NonBlocked).unwrap();
        let b = weighted_mean_moments(&data, &pseudo, 2.0, DrawScheme::Blocked { blocks: 50 }).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12 && (a.variance - b.variance).abs() < 1e-12);
    }

    #[test]
    fn moments_match_monte_carlo() {
        let (data, pseudo) = toy_values(200, 2);
        for scheme in [DrawScheme::NonBlocked, DrawScheme::Blocked { blocks: 10 }, DrawScheme::Blocked { blocks: 7 }] {
            let exact = weighted_mean_moments(&data, &pseudo, 1.0, scheme).unwrap();
            let (m, v, se_m, se_v) = moments_mc(&data, &pseudo, 1.0, scheme, 100_000);
            assert!((m - exact.mean).abs() < 4.0 * se_m, "{scheme:?}: mean {m} vs {}", exact.mean);
            assert!((v - exact.variance).abs() < 4.0 * se_v, "{scheme:?}: var {v} vs {}", exact.variance);
        }
    }

    #[test]
    fn degenerate_blocking_and_constant_functional() {
        let config = BlockedTestConfig { n: 40, blocks: 40, alpha: 1.0, draws: 1000, permutations: 200, block_pseudo: true, seed: 3 };
        let funcs = [TestFunction::Identity, TestFunction::Constant { value: 0.7 }];
        let reports = blocked_vs_nonblocked_test(&config, &funcs).unwrap();
        assert!(reports[0].p_value > 0.01, "{:?}", reports[0]);
        assert!(reports[1].statistic < 1e-12, "{:?}", reports[1]);
        let again = blocked_vs_nonblocked_test(&config, &funcs).unwrap();
        assert_eq!(reports, again);
    }

    #[test]
    fn vn_is_zero_without_prior_mass() {
        let r = vn_bound_check(100, 10, 0.0, 1000, 1).unwrap();
        assert_eq!((r.mean, r.std_error), (0.0, 0.0));
        assert!(r.within_bound);
    }

    #[test]
    fn vn_with_one_item_per_block_respects_bound() {
        // with L = n, V_n ~ Beta(alpha, n) and E[V_n] = alpha / (alpha + n)
        let r = vn_bound_check(100, 100, 1.0, 200_000, 2).unwrap();
        assert!((r.mean - 1.0 / 101.0).abs() < 4.0 * r.std_error, "{r:?}");
        assert!(r.within_bound);
    }

    #[test]
    fn decomposition_matches_direct_law() {
        let config = DecompositionTestConfig {
            n: 20,
            pseudo_atoms: 20,
            alpha: 2.0,
            blocks: 5,
            draws: 2000,
            projections: 8,
            permutations: 200,
            seed: 4,
        };
        let r = decomposition_test(&config).unwrap();
        assert!(r.p_value > 0.01, "{r:?}");
    }

    #[test]
    fn sandwich_agrees_under_correct_specification() {
        let config = SandwichConfig { n: 1000, samples: 1000, heteroscedastic: false, prior_variance: 100.0, seed: 5 };
        let r = sandwich_check(&config).unwrap();
        assert!(r.dev_npl_sandwich < 0.2 && r.dev_npl_parametric < 0.2 && r.dev_sandwich_parametric < 0.2, "{r:?}");
        for m in [r.npl, r.sandwich, r.parametric] {
            assert!((m[0][1] - m[1][0]).abs() < 1e-12);
            assert!(m[0][0] >= 0.0 && m[0][0] * m[1][1] - m[0][1] * m[1][0] >= 0.0);
        }
        let hetero = sandwich_check(&SandwichConfig { heteroscedastic: true, ..config }).unwrap();
        assert!(hetero.dev_npl_sandwich < hetero.dev_npl_parametric, "{hetero:?}");
    }
}
