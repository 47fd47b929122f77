//! Gamma, Dirichlet and block-Dirichlet weight sampling.
//!
//! All Dirichlet vectors are built from independent Gamma variates that are
//! kept in log space until the final normalization. Concentrations such as
//! `alpha / n` are routinely far below one, where a plain Gamma draw
//! underflows to zero; normalizing with log-sum-exp keeps the simplex exact.
//!
//! Weight draws follow the posterior-bootstrap convention: the train half and
//! the pseudo half of a [`WeightDraw`] together sum to `2n`.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::SeededRng;

/// Sizes of a posterior-bootstrap draw: `n` data points, `blocks` blocks, prior strength `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletSpec {
    pub n: usize,
    pub blocks: usize,
    pub alpha: f64,
}

impl DirichletSpec {
    pub fn new(n: usize, blocks: usize, alpha: f64) -> Result<Self> {
        let spec = DirichletSpec { n, blocks, alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return invalid!("n must be at least 1");
        }
        if self.blocks == 0 || self.blocks > self.n {
            return invalid!("block count {} must lie in 1..={}", self.blocks, self.n);
        }
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return invalid!("alpha must be a finite non-negative number, got {alpha}");
    }
    Ok(())
}

/// Random assignment of train and pseudo indices to blocks.
///
/// Block labels are `0..blocks`; each assignment vector has one entry per
/// data index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMapping {
    pub blocks: usize,
    pub train_assign: Vec<usize>,
    pub pseudo_assign: Vec<usize>,
}

impl BlockMapping {
    pub fn n(&self) -> usize {
        self.train_assign.len()
    }

    pub fn train_block_sizes(&self) -> Vec<usize> {
        block_sizes(&self.train_assign, self.blocks)
    }

    pub fn pseudo_block_sizes(&self) -> Vec<usize> {
        block_sizes(&self.pseudo_assign, self.blocks)
    }

    /// Members of each train block, in increasing index order.
    pub fn train_blocks(&self) -> Vec<Vec<usize>> {
        members(&self.train_assign, self.blocks)
    }

    pub fn pseudo_blocks(&self) -> Vec<Vec<usize>> {
        members(&self.pseudo_assign, self.blocks)
    }
}

fn block_sizes(assign: &[usize], blocks: usize) -> Vec<usize> {
    let mut sizes = vec![0; blocks];
    for &b in assign {
        sizes[b] += 1;
    }
    sizes
}

fn members(assign: &[usize], blocks: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); blocks];
    for (i, &b) in assign.iter().enumerate() {
        out[b].push(i);
    }
    out
}

/// Per-datum weights for the train and pseudo halves of the weighted objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDraw {
    pub w: Vec<f64>,
    pub w_tilde: Vec<f64>,
    pub mapping: Option<BlockMapping>,
    /// Coordinates with positive concentration whose weight underflowed to exactly zero.
    pub underflows: usize,
}

impl WeightDraw {
    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn total(&self) -> f64 {
        self.w.iter().sum::<f64>() + self.w_tilde.iter().sum::<f64>()
    }

    /// Deterministic draw: unit weight on every train point, zero on pseudo points.
    pub fn uniform_train(n: usize) -> Self {
        WeightDraw { w: vec![1.0; n], w_tilde: vec![0.0; n], mapping: None, underflows: 0 }
    }

    /// Train and pseudo weights concatenated, train first.
    pub fn concatenated(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.n());
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.w_tilde);
        out
    }
}

/// Natural log of a `Gamma(shape, 1)` variate.
///
/// Shapes at or above one use the Marsaglia–Tsang squeeze; smaller shapes
/// use `Ga(a) = Ga(a + 1) * U^(1/a)`, evaluated as `ln Ga(a + 1) + ln(U) / a`.
pub fn sample_log_gamma(shape: f64, rng: &mut SeededRng) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return invalid!("gamma shape must be positive and finite, got {shape}");
    }
    Ok(log_gamma_unchecked(shape, rng))
}

/// A `Gamma(shape, 1)` variate. May underflow to `0.0` for very small shapes;
/// use [`sample_log_gamma`] when the magnitude matters.
pub fn sample_gamma(shape: f64, rng: &mut SeededRng) -> Result<f64> {
    sample_log_gamma(shape, rng).map(f64::exp)
}

pub(crate) fn log_gamma_unchecked(shape: f64, rng: &mut SeededRng) -> f64 {
    if shape < 1.0 {
        // open interval so ln(u) is finite
        let u: f64 = 1.0 - rng.random::<f64>();
        return marsaglia_tsang_log(shape + 1.0, rng) + u.ln() / shape;
    }
    marsaglia_tsang_log(shape, rng)
}

fn marsaglia_tsang_log(shape: f64, rng: &mut SeededRng) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// Log-space Dirichlet draw where zero concentrations give exact zeros.
/// Returns the simplex vector and the number of positive-concentration
/// coordinates that underflowed to zero.
pub(crate) fn dirichlet_allowing_zeros(concentration: &[f64], rng: &mut SeededRng) -> (Vec<f64>, usize) {
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| if a > 0.0 { log_gamma_unchecked(a, rng) } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "at least one concentration must be positive");
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    let underflows = out
        .iter()
        .zip(concentration)
        .filter(|(v, a)| **a > 0.0 && **v == 0.0)
        .count();
    (out, underflows)
}

/// One draw from `Dir(concentration)`.
pub fn sample_dirichlet(concentration: &[f64], rng: &mut SeededRng) -> Result<Vec<f64>> {
    if concentration.is_empty() {
        return invalid!("dirichlet concentration must be non-empty");
    }
    if let Some(a) = concentration.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return invalid!("dirichlet concentrations must be positive and finite, got {a}");
    }
    Ok(dirichlet_allowing_zeros(concentration, rng).0)
}

/// Uniformly random partition of `0..n` into `blocks` blocks whose sizes are
/// `floor(n / blocks)` or `ceil(n / blocks)`, drawn independently for the
/// train and the pseudo side.
pub fn make_block_mapping(n: usize, blocks: usize, rng: &mut SeededRng) -> Result<BlockMapping> {
    if blocks == 0 || blocks > n {
        return invalid!("block count {blocks} must lie in 1..={n}");
    }
    let train_assign = random_assignment(n, blocks, rng);
    let pseudo_assign = random_assignment(n, blocks, rng);
    Ok(BlockMapping { blocks, train_assign, pseudo_assign })
}

pub(crate) fn random_assignment(n: usize, blocks: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / blocks;
    let extra = n % blocks;
    let mut assign = vec![0; n];
    let mut pos = 0;
    for b in 0..blocks {
        let size = base + usize::from(b < extra);
        for &i in &order[pos..pos + size] {
            assign[i] = b;
        }
        pos += size;
    }
    assign
}

/// Blocked posterior-bootstrap weights.
///
/// Draws `p ~ Dir(1 x L, (alpha/n) x L)` over the `2L` blocks and gives every
/// member of block `l` the weight `2n * p_l / |I_l|`. With equal block sizes
/// this is exactly `w_i = v_{u(i)}` for `v ~ 2L * Dir(..)`; with unequal sizes
/// each block keeps the mass the Dirichlet assigned it.
pub fn draw_weights_blocked(
    spec: &DirichletSpec,
    mapping: &BlockMapping,
    rng: &mut SeededRng,
) -> Result<WeightDraw> {
    spec.validate()?;
    if mapping.n() != spec.n || mapping.pseudo_assign.len() != spec.n || mapping.blocks != spec.blocks {
        return invalid!(
            "block mapping (n={}, blocks={}) does not match spec (n={}, blocks={})",
            mapping.n(),
            mapping.blocks,
            spec.n,
            spec.blocks
        );
    }
    let blocks = spec.blocks;
    let pseudo_conc = spec.alpha / spec.n as f64;
    let mut conc = vec![1.0; blocks];
    conc.extend(std::iter::repeat_n(pseudo_conc, blocks));
    let (p, underflows) = dirichlet_allowing_zeros(&conc, rng);

    let total = 2.0 * spec.n as f64;
    let train_sizes = mapping.train_block_sizes();
    let pseudo_sizes = mapping.pseudo_block_sizes();
    if train_sizes.contains(&0) || pseudo_sizes.contains(&0) {
        return invalid!("block mapping has an empty block");
    }
    let train_vals: Vec<f64> =
        (0..blocks).map(|l| total * p[l] / train_sizes[l] as f64).collect();
    let pseudo_vals: Vec<f64> =
        (0..blocks).map(|l| total * p[blocks + l] / pseudo_sizes[l] as f64).collect();

    Ok(WeightDraw {
        w: mapping.train_assign.iter().map(|&b| train_vals[b]).collect(),
        w_tilde: mapping.pseudo_assign.iter().map(|&b| pseudo_vals[b]).collect(),
        mapping: Some(mapping.clone()),
        underflows,
    })
}

/// Non-blocked weights: `(w, w_tilde) ~ 2n * Dir(1 x n, (alpha/n) x n)`.
pub fn draw_weights_nonblocked(n: usize, alpha: f64, rng: &mut SeededRng) -> Result<WeightDraw> {
    if n == 0 {
        return invalid!("n must be at least 1");
    }
    check_alpha(alpha)?;
    let mut conc = vec![1.0; n];
    conc.extend(std::iter::repeat_n(alpha / n as f64, n));
    let (mut p, underflows) = dirichlet_allowing_zeros(&conc, rng);
    let total = 2.0 * n as f64;
    for v in &mut p {
        *v *= total;
    }
    let w_tilde = p.split_off(n);
    Ok(WeightDraw { w: p, w_tilde, mapping: None, underflows })
}

/// Pieces of `F_B = V_n Q + (1 - V_n) B_n` for one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedDraw {
    pub v_n: f64,
    /// Simplex over the `T` pseudo atoms.
    pub q_weights: Vec<f64>,
    /// Simplex over the `n` data points.
    pub b_weights: Vec<f64>,
}

impl DecomposedDraw {
    /// Combined simplex, data points first then pseudo atoms.
    pub fn composed(&self) -> Vec<f64> {
        let keep = 1.0 - self.v_n;
        self.b_weights
            .iter()
            .map(|b| keep * b)
            .chain(self.q_weights.iter().map(|q| self.v_n * q))
            .collect()
    }
}

/// Draws the three independent pieces of the blocked weighted posterior with
/// `T` un-blocked pseudo atoms:
///
/// * `V_n = G / (G + H_n)` with `G ~ Ga(alpha, 1)` and `H_n ~ Ga(L, rate L/n)`,
/// * `Q ~ Dir(alpha/T x T)`,
/// * `B_n` with `B_i = eta_{u(i)} / |I_{u(i)}|`, `eta ~ Dir(1 x L)`, fresh mapping `u`.
///
/// With `blocks == n` the composed vector has the law of `Dir(1 x n, alpha/T x T)`.
pub fn draw_weights_decomposed(
    n: usize,
    pseudo_atoms: usize,
    alpha: f64,
    blocks: usize,
    rng: &mut SeededRng,
) -> Result<DecomposedDraw> {
    if n == 0 || pseudo_atoms == 0 {
        return invalid!("n and T must be at least 1");
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid!("alpha must be positive for the decomposition, got {alpha}");
    }
    if blocks == 0 || blocks > n {
        return invalid!("block count {blocks} must lie in 1..={n}");
    }
    let v_n = sample_v_n(n, blocks, alpha, rng);
    let q_weights = dirichlet_allowing_zeros(&vec![alpha / pseudo_atoms as f64; pseudo_atoms], rng).0;
    let assign = random_assignment(n, blocks, rng);
    let sizes = block_sizes(&assign, blocks);
    let eta = dirichlet_allowing_zeros(&vec![1.0; blocks], rng).0;
    let b_weights = assign.iter().map(|&b| eta[b] / sizes[b] as f64).collect();
    Ok(DecomposedDraw { v_n, q_weights, b_weights })
}

/// `G / (G + H_n)` computed as a logistic of log-Gamma differences.
/// `alpha == 0` gives exactly zero.
pub(crate) fn sample_v_n(n: usize, blocks: usize, alpha: f64, rng: &mut SeededRng) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let log_g = log_gamma_unchecked(alpha, rng);
    let log_h = log_gamma_unchecked(blocks as f64, rng) + (n as f64 / blocks as f64).ln();
    1.0 / (1.0 + (log_h - log_g).exp())
}
