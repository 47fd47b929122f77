//! Parallel posterior sampling by weighted-loss minimization, plus the plain
//! and L2SP fine-tuning baselines.
//!
//! Every member owns a random stream seeded by `derive_seed(master_seed, m)`.
//! From that stream it draws its block mapping, its weights and its minibatch
//! order, so the ensemble does not depend on the worker count or on the order
//! in which members finish.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::dirichlet::{draw_weights_blocked, draw_weights_nonblocked, make_block_mapping, DirichletSpec, WeightDraw};
use crate::error::{invalid, NptlError, Result};
use crate::matrix::Matrix;
use crate::models::{read_param_file, write_param_file, Architecture, ModelSpec, ParamVector, Target};
use crate::optim::{full_objective, minimize, L2sp, OptimizerConfig, TrainOptions, TrainOutcome, WeightedData};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};
use crate::transfer::PseudoDataset;

pub const DEFAULT_BLOCKS: usize = 10;
pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DrawScheme {
    Blocked { blocks: usize },
    NonBlocked,
}

impl Default for DrawScheme {
    fn default() -> Self {
        DrawScheme::Blocked { blocks: DEFAULT_BLOCKS }
    }
}

impl DrawScheme {
    pub fn draw(self, n: usize, alpha: f64, rng: &mut SeededRng) -> Result<WeightDraw> {
        match self {
            DrawScheme::Blocked { blocks } => {
                let spec = DirichletSpec::new(n, blocks, alpha)?;
                let mapping = make_block_mapping(n, blocks, rng)?;
                draw_weights_blocked(&spec, &mapping, rng)
            }
            DrawScheme::NonBlocked => draw_weights_nonblocked(n, alpha, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub samples: usize,
    pub alpha: f64,
    #[serde(default)]
    pub scheme: DrawScheme,
    /// Per-member optimizer; its `seed` is unused, members seed from `master_seed`.
    pub opt: OptimizerConfig,
    #[serde(default)]
    pub master_seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return invalid!("sampler needs at least one sample");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return invalid!("alpha must be a finite non-negative number, got {}", self.alpha);
        }
        if let DrawScheme::Blocked { blocks: 0 } = self.scheme {
            return invalid!("block count must be at least 1");
        }
        self.opt.validate()
    }
}

/// Train rows followed by pseudo rows, ready for weighted minimization.
#[derive(Debug, Clone)]
pub struct NptlProblem<'a> {
    pub spec: &'a ModelSpec,
    pub init: &'a ParamVector,
    inputs: Matrix,
    targets: Vec<Target>,
    n_train: usize,
}

impl<'a> NptlProblem<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        init: &'a ParamVector,
        train: &LabeledDataset,
        pseudo: Option<&PseudoDataset>,
    ) -> Result<Self> {
        spec.validate()?;
        spec.check_params(init)?;
        if train.is_empty() {
            return invalid!("training set is empty");
        }
        let (inputs, targets) = match pseudo {
            Some(p) => {
                if p.len() != train.len() {
                    return invalid!("pseudo data has {} atoms, training set has {} rows", p.len(), train.len());
                }
                let mut targets = train.targets.clone();
                targets.extend(p.targets.iter().cloned());
                (train.features.vstack(&p.inputs)?, targets)
            }
            None => (train.features.clone(), train.targets.clone()),
        };
        if inputs.cols() != spec.input_dim {
            return invalid!("data has {} features, model expects {}", inputs.cols(), spec.input_dim);
        }
        targets.iter().try_for_each(|t| t.validate(spec))?;
        Ok(NptlProblem { spec, init, inputs, targets, n_train: train.len() })
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn data<'b>(&'b self, weights: &'b [f64]) -> WeightedData<'b> {
        WeightedData { inputs: &self.inputs, targets: &self.targets, weights }
    }

    /// Per-row weights for a draw: train weights then pseudo weights.
    pub fn weights_for(&self, draw: &WeightDraw) -> Result<Vec<f64>> {
        let w = if self.rows() == self.n_train { draw.w.clone() } else { draw.concatenated() };
        if w.len() != self.rows() {
            return invalid!("weight draw covers {} rows, problem has {}", w.len(), self.rows());
        }
        Ok(w)
    }

    pub fn objective(&self, params: &ParamVector, weights: &[f64]) -> f64 {
        full_objective(self.spec, params, &self.data(weights), None)
    }
}

/// Weighted objective `sum_j w_j l(x_j, y_j) + sum_k w~_k l(x_k, y~_k)`.
pub fn nptl_objective(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &LabeledDataset,
    pseudo: &PseudoDataset,
    draw: &WeightDraw,
) -> Result<f64> {
    if draw.w.len() != train.len() || draw.w_tilde.len() != pseudo.len() {
        return invalid!(
            "draw sizes ({}, {}) do not match data sizes ({}, {})",
            draw.w.len(),
            draw.w_tilde.len(),
            train.len(),
            pseudo.len()
        );
    }
    let problem = NptlProblem::new(spec, params, train, Some(pseudo))?;
    Ok(problem.objective(params, &draw.concatenated()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberFit {
    pub params: ParamVector,
    pub objective: f64,
    pub initial_objective: f64,
}

/// Minimizes one weighted objective starting from the problem's init.
pub trait MemberSolver: Sync {
    fn solve(&self, problem: &NptlProblem, weights: &[f64], rng: &mut SeededRng) -> Result<MemberFit>;
}

/// Minibatch SGD, optionally with an L2SP pull toward the init.
#[derive(Debug, Clone)]
pub struct SgdSolver {
    pub opt: OptimizerConfig,
    pub l2sp_beta: Option<f64>,
}

impl MemberSolver for SgdSolver {
    fn solve(&self, problem: &NptlProblem, weights: &[f64], rng: &mut SeededRng) -> Result<MemberFit> {
        let options = TrainOptions {
            trainable: None,
            penalty: self.l2sp_beta.map(|beta| L2sp { anchor: problem.init, beta }),
        };
        let out = minimize(problem.spec, problem.init, &problem.data(weights), &self.opt, &options, rng)?;
        Ok(MemberFit { params: out.params, objective: out.objective, initial_objective: out.initial_objective })
    }
}

/// Exact minimizer of weighted squared error for an intercept-only fit: the
/// input weights stay at zero and the bias is the weighted mean of the targets.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocationSolver;

impl MemberSolver for LocationSolver {
    fn solve(&self, problem: &NptlProblem, weights: &[f64], _rng: &mut SeededRng) -> Result<MemberFit> {
        let y = regression_targets(problem)?;
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return invalid!("all weights are zero");
        }
        let mean = y.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / total;
        let mut params = problem.spec.zeros();
        *params.values.last_mut().expect("bias") = mean;
        Ok(MemberFit {
            objective: problem.objective(&params, weights),
            initial_objective: problem.objective(problem.init, weights),
            params,
        })
    }
}

/// Exact weighted least squares with an intercept.
#[derive(Debug, Clone, Copy, Default)]
pub struct WlsSolver;

impl MemberSolver for WlsSolver {
    fn solve(&self, problem: &NptlProblem, weights: &[f64], _rng: &mut SeededRng) -> Result<MemberFit> {
        let y = regression_targets(problem)?;
        let params = problem.spec.params_from(weighted_least_squares(problem.inputs(), &y, weights)?)?;
        Ok(MemberFit {
            objective: problem.objective(&params, weights),
            initial_objective: problem.objective(problem.init, weights),
            params,
        })
    }
}

fn regression_targets(problem: &NptlProblem) -> Result<Vec<f64>> {
    if problem.spec.architecture != Architecture::LinearRegression {
        return invalid!("closed-form solvers need a linear regression model");
    }
    problem
        .targets()
        .iter()
        .map(|t| match t {
            Target::Value(v) => Ok(*v),
            other => invalid!("closed-form solvers need numeric targets, got {other:?}"),
        })
        .collect()
}

/// Solves `min sum_i w_i (y_i - x_i' beta - b)^2`, returning `[beta.., b]`.
pub fn weighted_least_squares(x: &Matrix, y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if x.rows() != y.len() || y.len() != w.len() {
        return invalid!("weighted least squares needs matching sizes");
    }
    let p = x.cols() + 1;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut z = vec![1.0; p];
    for (i, (&yi, &wi)) in y.iter().zip(w).enumerate() {
        if wi == 0.0 {
            continue;
        }
        z[..p - 1].copy_from_slice(x.row(i));
        for a in 0..p {
            rhs[a] += wi * z[a] * yi;
            for b in 0..=a {
                gram[(a, b)] += wi * z[a] * z[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let Some(chol) = gram.cholesky() else {
        return invalid!("weighted design matrix is singular");
    };
    Ok(chol.solve(&rhs).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub index: usize,
    pub seed: u64,
    pub objective: f64,
    pub initial_objective: f64,
    pub wall_seconds: f64,
    /// Positive-concentration weights that underflowed to zero.
    pub underflows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub index: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    pub spec: ModelSpec,
    /// Successful members in index order.
    pub members: Vec<ParamVector>,
    pub records: Vec<MemberRecord>,
    pub failures: Vec<MemberFailure>,
}

impl PosteriorEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn total_underflows(&self) -> usize {
        self.records.iter().map(|r| r.underflows).sum()
    }

    /// Writes `member_XXXX.bin` per member plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, config: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| NptlError::io(dir, e))?;
        let mut files = Vec::with_capacity(self.len());
        for (member, record) in self.members.iter().zip(&self.records) {
            let name = format!("member_{:04}.bin", record.index);
            write_param_file(dir.join(&name), &self.spec, member)?;
            files.push(name);
        }
        let manifest = EnsembleManifest {
            format: ENSEMBLE_FORMAT_VERSION,
            spec: self.spec.clone(),
            spec_hash: format!("{:016x}", self.spec.spec_hash()),
            config,
            files,
            records: self.records.clone(),
            failures: self.failures.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| NptlError::io(&path, e))
    }

    /// Loads an ensemble directory, returning it with the stored config.
    pub fn load(dir: impl AsRef<Path>) -> Result<(PosteriorEnsemble, serde_json::Value)> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| NptlError::io(&path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)
            .map_err(|e| NptlError::Format { path: path.clone(), reason: e.to_string() })?;
        if manifest.format != ENSEMBLE_FORMAT_VERSION {
            return Err(NptlError::Format { path, reason: format!("unsupported format {}", manifest.format) });
        }
        if manifest.files.len() != manifest.records.len() {
            return Err(NptlError::Format { path, reason: "file list and records differ in length".into() });
        }
        let paths: Vec<PathBuf> = manifest.files.iter().map(|f| dir.join(f)).collect();
        if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
            return invalid!("ensemble member file {} is missing", missing.display());
        }
        let members = paths.iter().map(|p| read_param_file(p, &manifest.spec)).collect::<Result<Vec<_>>>()?;
        let ensemble = PosteriorEnsemble {
            spec: manifest.spec,
            members,
            records: manifest.records,
            failures: manifest.failures,
        };
        Ok((ensemble, manifest.config))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleManifest {
    format: u32,
    spec: ModelSpec,
    spec_hash: String,
    config: serde_json::Value,
    files: Vec<String>,
    records: Vec<MemberRecord>,
    failures: Vec<MemberFailure>,
}

/// Member index, seed, seconds, and the fit with its underflow count.
type MemberOutcome = (usize, u64, f64, Result<(MemberFit, usize)>);

/// Runs `count` independent members on a pool of `workers` threads (0 picks
/// the rayon default) and collects them in index order.
fn run_members<F>(spec: &ModelSpec, count: usize, master_seed: u64, workers: usize, member: F) -> Result<PosteriorEnsemble>
where
    F: Fn(&mut SeededRng) -> Result<(MemberFit, usize)> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| NptlError::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<MemberOutcome> = pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|index| {
                let seed = derive_seed(master_seed, index as u64);
                let start = Instant::now();
                let fit = member(&mut rng_from_seed(seed));
                (index, seed, start.elapsed().as_secs_f64(), fit)
            })
            .collect()
    });

    let mut ensemble = PosteriorEnsemble { spec: spec.clone(), members: Vec::new(), records: Vec::new(), failures: Vec::new() };
    for (index, seed, wall_seconds, fit) in outcomes {
        match fit {
            Ok((fit, underflows)) => {
                if underflows > 0 {
                    log::warn!("member {index}: {underflows} positive-concentration weights underflowed to zero");
                }
                ensemble.records.push(MemberRecord {
                    index,
                    seed,
                    objective: fit.objective,
                    initial_objective: fit.initial_objective,
                    wall_seconds,
                    underflows,
                });
                ensemble.members.push(fit.params);
            }
            Err(e) => {
                log::warn!("member {index} failed: {e}");
                ensemble.failures.push(MemberFailure { index, seed, message: e.to_string() });
            }
        }
    }
    if ensemble.members.is_empty() {
        return Err(NptlError::AllMembersDiverged { count });
    }
    Ok(ensemble)
}

/// Posterior sampling with minibatch SGD members.
pub fn nptl_sample(
    spec: &ModelSpec,
    config: &SamplerConfig,
    init: &ParamVector,
    train: &LabeledDataset,
    pseudo: &PseudoDataset,
    workers: usize,
) -> Result<PosteriorEnsemble> {
    let solver = SgdSolver { opt: config.opt.clone(), l2sp_beta: None };
    nptl_sample_with(spec, config, init, train, pseudo, &solver, workers)
}

pub fn nptl_sample_with(
    spec: &ModelSpec,
    config: &SamplerConfig,
    init: &ParamVector,
    train: &LabeledDataset,
    pseudo: &PseudoDataset,
    solver: &dyn MemberSolver,
    workers: usize,
) -> Result<PosteriorEnsemble> {
    config.validate()?;
    let problem = NptlProblem::new(spec, init, train, Some(pseudo))?;
    let n = problem.n_train();
    if let DrawScheme::Blocked { blocks } = config.scheme {
        if blocks > n {
            return invalid!("block count {blocks} exceeds the {n} training rows");
        }
    }
    run_members(spec, config.samples, config.master_seed, workers, |rng| {
        let draw = config.scheme.draw(n, config.alpha, rng)?;
        let weights = problem.weights_for(&draw)?;
        Ok((solver.solve(&problem, &weights, rng)?, draw.underflows))
    })
}

/// Independent unweighted fine-tunes from `init` that differ only in their
/// minibatch order; with `l2sp_beta` each is pulled toward `init`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_baseline(
    spec: &ModelSpec,
    count: usize,
    init: &ParamVector,
    train: &LabeledDataset,
    opt: &OptimizerConfig,
    l2sp_beta: Option<f64>,
    master_seed: u64,
    workers: usize,
) -> Result<PosteriorEnsemble> {
    if count == 0 {
        return invalid!("ensemble needs at least one member");
    }
    opt.validate()?;
    let problem = NptlProblem::new(spec, init, train, None)?;
    let weights = vec![1.0; problem.rows()];
    let solver = SgdSolver { opt: opt.clone(), l2sp_beta };
    run_members(spec, count, master_seed, workers, |rng| Ok((solver.solve(&problem, &weights, rng)?, 0)))
}

/// Minimizes the train NLL plus `||theta - anchor||^2 / (2 beta)` from `init`.
pub fn l2sp_finetune(
    spec: &ModelSpec,
    init: &ParamVector,
    anchor: &ParamVector,
    beta: f64,
    train: &LabeledDataset,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome> {
    let weights = vec![1.0; train.len()];
    let data = WeightedData { inputs: &train.features, targets: &train.targets, weights: &weights };
    let options = TrainOptions { trainable: None, penalty: Some(L2sp { anchor, beta }) };
    minimize(spec, init, &data, opt, &options, &mut rng_from_seed(opt.seed))
}
