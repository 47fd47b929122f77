//! Declarative experiment configuration and the stages of the transfer
//! pipeline: data, pretraining, probing, alpha search, posterior sampling,
//! baselines, evaluation and soup.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{apply_shift, gen_gaussian_mixture, read_csv, split, LabeledDataset, ShiftSpec, SplitSpec, TargetKind};
use crate::diagnostics::TestFunction;
use crate::error::{invalid, NptlError, Result};
use crate::inference::{bma_predict, greedy_soup, metric_nll, EvalReport, SoupMetric, SoupResult, DEFAULT_ECE_BINS};
use crate::models::{Activation, Architecture, ModelSpec, ParamVector};
use crate::optim::{OptimizerConfig, Schedule, TrainOutcome};
use crate::rng::derive_seed;
use crate::sampler::{ensemble_baseline, l2sp_finetune, nptl_sample, DrawScheme, MemberRecord, PosteriorEnsemble, SamplerConfig};
use crate::transfer::{
    default_alpha_grid, linear_probe, make_base_measure, pretrain, select_alpha, AlphaSearch, AlphaSelection,
    PseudoDataset, DEFAULT_SEARCH_SAMPLES,
};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

pub const METHOD_NPTL: &str = "NPTL";
pub const METHOD_SOUP: &str = "NPTL-Soup";
pub const METHOD_ENSEMBLE_L2SP: &str = "Ensemble+L2SP";
pub const METHOD_L2SP: &str = "L2SP";
pub const METHOD_FINETUNE: &str = "Fine-tune";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Balanced Gaussian mixture, see [`gen_gaussian_mixture`].
    Mixture { classes: usize, dim: usize, n: usize, separation: f64 },
    /// Class-labeled CSV with header `x0,..,target`.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub upstream: DataSource,
    pub downstream: DataSource,
    /// Applied to the downstream data after loading.
    #[serde(default)]
    pub shift: ShiftSpec,
    pub test_fraction: f64,
    /// Seed for generation and splitting; the experiment seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pretrain: OptimizerConfig,
    pub probe: OptimizerConfig,
    /// Optimizer of the fine-tuning baselines.
    pub finetune: OptimizerConfig,
    pub l2sp_beta: f64,
    pub baseline_members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub samples: usize,
    /// Fixed prior strength; the alpha search decides when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub scheme: DrawScheme,
    pub opt: OptimizerConfig,
    /// Candidates for the alpha search; `{0.01, 0.1, 1, 10, 100} * n / 100` when absent.
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(default = "default_search_samples")]
    pub search_samples: usize,
}

fn default_search_samples() -> usize {
    DEFAULT_SEARCH_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default)]
    pub soup_metric: SoupMetric,
}

fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ece_bins: DEFAULT_ECE_BINS, soup_metric: SoupMetric::Nll }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub n: usize,
    pub blocks: usize,
    pub alpha: f64,
    pub draws: usize,
    pub permutations: usize,
    pub functionals: Vec<TestFunction>,
    pub vn_draws: usize,
    pub sandwich_n: usize,
    pub sandwich_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            n: 200,
            blocks: 10,
            alpha: 1.0,
            draws: 2000,
            permutations: 1000,
            functionals: TestFunction::default_family(),
            vn_draws: 100_000,
            sandwich_n: 2000,
            sandwich_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_format")]
    pub format: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub sampler: SamplerSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn default_format() -> u32 {
    CONFIG_FORMAT_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Pipeline stages, each with its own seed derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain = 1,
    Probe = 2,
    AlphaSearch = 3,
    Sample = 4,
    Finetune = 5,
    Baseline = 6,
    Diagnose = 7,
}

pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    derive_seed(master, 1000 + stage as u64)
}

fn key_err(key: &str, msg: impl std::fmt::Display) -> NptlError {
    NptlError::InvalidArgument(format!("config key `{key}`: {msg}"))
}

impl ExperimentConfig {
    /// The synthetic shifted-mixture benchmark: an 8-class upstream mixture,
    /// and a downstream task keeping four of its classes under a quarter-turn
    /// rotation and a label permutation.
    pub fn shifted_mixture() -> Self {
        let opt = |lr: f64, epochs: usize, batch: usize| OptimizerConfig {
            base_lr: lr,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            batch_size: batch,
            epochs,
            seed: 0,
        };
        ExperimentConfig {
            format: CONFIG_FORMAT_VERSION,
            name: "shifted-mixture".into(),
            seed: 0,
            output_dir: default_output_dir(),
            dataset: DatasetConfig {
                upstream: DataSource::Mixture { classes: 8, dim: 4, n: 4000, separation: 1.0 },
                downstream: DataSource::Mixture { classes: 8, dim: 4, n: 800, separation: 1.0 },
                shift: ShiftSpec {
                    rotation_angle: std::f64::consts::FRAC_PI_2,
                    mean_shift: Vec::new(),
                    label_permutation: Some(vec![2, 0, 3, 1]),
                    class_subset: Some(vec![0, 1, 4, 5]),
                },
                test_fraction: 0.5,
                seed: None,
            },
            model: ModelConfig { architecture: Architecture::Mlp, hidden_sizes: vec![64, 64], activation: Activation::Relu },
            pipeline: PipelineConfig {
                pretrain: opt(0.05, 30, 64),
                probe: opt(0.05, 50, 32),
                finetune: opt(0.02, 50, 32),
                l2sp_beta: 0.1,
                baseline_members: 10,
            },
            sampler: SamplerSection {
                samples: 10,
                alpha: None,
                scheme: DrawScheme::default(),
                opt: opt(0.02, 50, 32),
                alpha_grid: None,
                search_samples: DEFAULT_SEARCH_SAMPLES,
            },
            eval: EvalConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NptlError::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| NptlError::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section, naming the offending key on failure.
    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT_VERSION {
            return Err(key_err("format", format!("unsupported version {}", self.format)));
        }
        for (key, src) in [("dataset.upstream", &self.dataset.upstream), ("dataset.downstream", &self.dataset.downstream)] {
            match src {
                DataSource::Mixture { classes, dim, n, separation } => {
                    if *classes < 2 || *dim == 0 || n < classes || !(*separation >= 0.0) {
                        return Err(key_err(key, "mixture needs classes >= 2, dim >= 1, n >= classes, separation >= 0"));
                    }
                }
                DataSource::Csv { path } => {
                    if !path.is_file() {
                        return Err(key_err(&format!("{key}.path"), format!("file {} does not exist", path.display())));
                    }
                }
            }
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return Err(key_err("dataset.test_fraction", "must lie in (0, 1)"));
        }
        let model = ModelSpec {
            architecture: self.model.architecture,
            input_dim: 1,
            output_dim: 2,
            hidden_sizes: self.model.hidden_sizes.clone(),
            activation: self.model.activation,
        };
        if self.model.architecture == Architecture::LinearRegression {
            return Err(key_err("model.architecture", "the transfer pipeline needs a classifier"));
        }
        model.validate().map_err(|e| key_err("model", e))?;
        for (key, opt) in [
            ("pipeline.pretrain", &self.pipeline.pretrain),
            ("pipeline.probe", &self.pipeline.probe),
            ("pipeline.finetune", &self.pipeline.finetune),
            ("sampler.opt", &self.sampler.opt),
        ] {
            opt.validate().map_err(|e| key_err(key, e))?;
        }
        if !(self.pipeline.l2sp_beta > 0.0) {
            return Err(key_err("pipeline.l2sp_beta", "must be positive"));
        }
        if self.pipeline.baseline_members == 0 {
            return Err(key_err("pipeline.baseline_members", "must be at least 1"));
        }
        if self.sampler.samples == 0 {
            return Err(key_err("sampler.samples", "must be at least 1"));
        }
        if let Some(a) = self.sampler.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(key_err("sampler.alpha", "must be finite and non-negative"));
            }
        }
        if let Some(grid) = &self.sampler.alpha_grid {
            if grid.is_empty() || grid.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                return Err(key_err("sampler.alpha_grid", "must be a nonempty list of non-negative numbers"));
            }
        }
        if self.sampler.search_samples == 0 {
            return Err(key_err("sampler.search_samples", "must be at least 1"));
        }
        if let DrawScheme::Blocked { blocks: 0 } = self.sampler.scheme {
            return Err(key_err("sampler.scheme.blocks", "must be at least 1"));
        }
        if self.eval.ece_bins == 0 {
            return Err(key_err("eval.ece_bins", "must be at least 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form, output directory excluded.
    pub fn config_hash(&self) -> String {
        hash_json(&ExperimentConfig { output_dir: PathBuf::new(), ..self.clone() })
    }

    /// Digest of the sections that determine the data.
    pub fn data_hash(&self) -> String {
        hash_json(&(&self.dataset, self.data_seed()))
    }

    pub fn data_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn upstream_spec(&self, data: &Datasets) -> ModelSpec {
        self.spec_for(data.upstream.dim(), data.upstream.num_classes())
    }

    pub fn downstream_spec(&self, data: &Datasets) -> ModelSpec {
        self.spec_for(data.train.dim(), data.downstream_classes)
    }

    fn spec_for(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.model.architecture,
            input_dim,
            output_dim: classes,
            hidden_sizes: self.model.hidden_sizes.clone(),
            activation: self.model.activation,
        }
    }

    fn with_seed(opt: &OptimizerConfig, seed: u64) -> OptimizerConfig {
        OptimizerConfig { seed, ..opt.clone() }
    }

    pub fn sampler_config(&self, alpha: f64) -> SamplerConfig {
        SamplerConfig {
            samples: self.sampler.samples,
            alpha,
            scheme: self.sampler.scheme,
            opt: self.sampler.opt.clone(),
            master_seed: stage_seed(self.seed, Stage::Sample),
        }
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Upstream data and the downstream train/val/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub upstream: LabeledDataset,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub downstream_classes: usize,
}

fn load_source(src: &DataSource, seed: u64) -> Result<LabeledDataset> {
    match src {
        DataSource::Mixture { classes, dim, n, separation } => gen_gaussian_mixture(*classes, *dim, *n, *separation, seed),
        DataSource::Csv { path } => read_csv(path, TargetKind::Class),
    }
}

impl Datasets {
    pub fn build(cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        let upstream = load_source(&cfg.upstream, derive_seed(seed, 1))?;
        let raw = load_source(&cfg.downstream, derive_seed(seed, 2))?;
        let downstream = apply_shift(&raw, &cfg.shift)?;
        let downstream_classes = downstream.num_classes();
        if upstream.dim() != downstream.dim() {
            return invalid!("upstream has {} features, downstream {}", upstream.dim(), downstream.dim());
        }
        let (train, val, test) = split(&downstream, &SplitSpec::with_default_val(cfg.test_fraction, derive_seed(seed, 3)))?;
        Ok(Datasets { upstream, train, val, test, downstream_classes })
    }
}

/// Scores an ensemble's averaged prediction on `data`.
pub fn evaluate_members(
    method: &str,
    spec: &ModelSpec,
    members: &[ParamVector],
    data: &LabeledDataset,
    dataset_id: &str,
    seed: u64,
    bins: usize,
) -> Result<EvalReport> {
    let probs = bma_predict(spec, members, &data.features)?;
    EvalReport::from_probs(method, dataset_id, seed, members.len(), &probs, &data.labels()?, bins)
}

pub fn run_pretrain(cfg: &ExperimentConfig, data: &Datasets) -> Result<TrainOutcome> {
    let opt = ExperimentConfig::with_seed(&cfg.pipeline.pretrain, stage_seed(cfg.seed, Stage::Pretrain));
    pretrain(&cfg.upstream_spec(data), &data.upstream, &opt)
}

pub fn run_probe(cfg: &ExperimentConfig, data: &Datasets, theta_up: &ParamVector) -> Result<TrainOutcome> {
    let opt = ExperimentConfig::with_seed(&cfg.pipeline.probe, stage_seed(cfg.seed, Stage::Probe));
    linear_probe(&cfg.downstream_spec(data), theta_up, &data.train, &opt)
}

pub fn run_alpha_search(
    cfg: &ExperimentConfig,
    data: &Datasets,
    probed: &ParamVector,
    pseudo: &PseudoDataset,
    workers: usize,
) -> Result<AlphaSelection> {
    let spec = cfg.downstream_spec(data);
    let grid = cfg.sampler.alpha_grid.clone().unwrap_or_else(|| default_alpha_grid(data.train.len()));
    let template = cfg.sampler_config(0.0);
    let search = AlphaSearch {
        spec: &spec,
        init: probed,
        train: &data.train,
        pseudo,
        val: &data.val,
        sampler: &template,
        samples: cfg.sampler.search_samples,
        master_seed: stage_seed(cfg.seed, Stage::AlphaSearch),
        workers,
    };
    select_alpha(&grid, &search)
}

pub fn run_nptl(
    cfg: &ExperimentConfig,
    data: &Datasets,
    probed: &ParamVector,
    pseudo: &PseudoDataset,
    alpha: f64,
    workers: usize,
) -> Result<PosteriorEnsemble> {
    nptl_sample(&cfg.downstream_spec(data), &cfg.sampler_config(alpha), probed, &data.train, pseudo, workers)
}

/// Fine-tuning baselines from the probed solution, by method name.
pub fn run_baselines(
    cfg: &ExperimentConfig,
    data: &Datasets,
    probed: &ParamVector,
    workers: usize,
) -> Result<Vec<(&'static str, PosteriorEnsemble)>> {
    let spec = cfg.downstream_spec(data);
    let opt = ExperimentConfig::with_seed(&cfg.pipeline.finetune, stage_seed(cfg.seed, Stage::Finetune));
    let beta = cfg.pipeline.l2sp_beta;
    let start = Instant::now();
    let outcome = l2sp_finetune(&spec, probed, probed, beta, &data.train, &opt)?;
    let record = MemberRecord {
        index: 0,
        seed: opt.seed,
        objective: outcome.objective,
        initial_objective: outcome.initial_objective,
        wall_seconds: start.elapsed().as_secs_f64(),
        underflows: 0,
    };
    let l2sp = PosteriorEnsemble { spec: spec.clone(), members: vec![outcome.params], records: vec![record], failures: Vec::new() };
    let plain = ensemble_baseline(&spec, 1, probed, &data.train, &opt, None, opt.seed, workers)?;
    let ensemble = ensemble_baseline(
        &spec,
        cfg.pipeline.baseline_members,
        probed,
        &data.train,
        &opt,
        Some(beta),
        stage_seed(cfg.seed, Stage::Baseline),
        workers,
    )?;
    Ok(vec![(METHOD_L2SP, l2sp), (METHOD_FINETUNE, plain), (METHOD_ENSEMBLE_L2SP, ensemble)])
}

pub fn run_soup(cfg: &ExperimentConfig, spec: &ModelSpec, members: &[ParamVector], val: &LabeledDataset) -> Result<SoupResult> {
    greedy_soup(spec, members, &val.features, &val.labels()?, cfg.eval.soup_metric)
}

/// Results of the whole pipeline run in memory.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub alpha: AlphaSelection,
    pub nptl: PosteriorEnsemble,
    pub soup: SoupResult,
    /// Test-set reports per method.
    pub test: Vec<EvalReport>,
    /// Validation-set reports per method.
    pub val: Vec<EvalReport>,
    /// Test NLL of each NPTL member on its own.
    pub member_test_nll: Vec<f64>,
}

impl PipelineOutcome {
    pub fn test_nll(&self, method: &str) -> Option<f64> {
        self.test.iter().find(|r| r.method == method).map(|r| r.nll)
    }

    pub fn val_nll(&self, method: &str) -> Option<f64> {
        self.val.iter().find(|r| r.method == method).map(|r| r.nll)
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig, workers: usize) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let data = Datasets::build(&cfg.dataset, cfg.data_seed())?;
    let spec = cfg.downstream_spec(&data);
    let theta_up = run_pretrain(cfg, &data)?.params;
    let probed = run_probe(cfg, &data, &theta_up)?.params;
    let pseudo = make_base_measure(&spec, &probed, &data.train.features)?;
    let alpha = match cfg.sampler.alpha {
        Some(a) => AlphaSelection { alpha: a, table: Vec::new() },
        None => run_alpha_search(cfg, &data, &probed, &pseudo, workers)?,
    };
    let nptl = run_nptl(cfg, &data, &probed, &pseudo, alpha.alpha, workers)?;
    let soup = run_soup(cfg, &spec, &nptl.members, &data.val)?;

    let mut methods: Vec<(&str, Vec<ParamVector>)> = vec![(METHOD_NPTL, nptl.members.clone())];
    for (name, ensemble) in run_baselines(cfg, &data, &probed, workers)? {
        methods.push((name, ensemble.members));
    }
    methods.push((METHOD_SOUP, vec![soup.params.clone()]));

    let bins = cfg.eval.ece_bins;
    let mut test = Vec::new();
    let mut val = Vec::new();
    for (name, members) in &methods {
        test.push(evaluate_members(name, &spec, members, &data.test, &cfg.name, cfg.seed, bins)?);
        val.push(evaluate_members(name, &spec, members, &data.val, &cfg.name, cfg.seed, bins)?);
    }
    let labels = data.test.labels()?;
    let member_test_nll = nptl
        .members
        .iter()
        .map(|m| metric_nll(&bma_predict(&spec, std::slice::from_ref(m), &data.test.features)?, &labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineOutcome { alpha, nptl, soup, test, val, member_test_nll })
}
