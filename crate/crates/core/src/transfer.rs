//! Pretraining, linear probing, base-measure construction and empirical-Bayes
//! selection of the prior strength `alpha`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{invalid, NptlError, Result};
use crate::inference::{bma_predict, metric_nll};
use crate::matrix::Matrix;
use crate::models::{forward, predict_proba, ModelSpec, ParamVector, Target};
use crate::optim::{minimize, OptimizerConfig, TrainOptions, TrainOutcome, WeightedData};
use crate::rng::{rng_from_seed, stream, stream_seed};
use crate::sampler::{nptl_sample, SamplerConfig};

/// Atoms of the base measure: the downstream training inputs labeled by the
/// probed model. Classifiers give soft probability rows, regressors values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDataset {
    pub inputs: Matrix,
    pub targets: Vec<Target>,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sum of the soft-label entropies, the smallest soft cross-entropy any model can reach.
    pub fn entropy(&self) -> f64 {
        self.targets
            .iter()
            .map(|t| match t {
                Target::Soft(p) => p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum(),
                _ => 0.0,
            })
            .sum()
    }
}

fn train_unweighted(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &LabeledDataset,
    opt: &OptimizerConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let weights = vec![1.0; data.len()];
    let weighted = WeightedData { inputs: &data.features, targets: &data.targets, weights: &weights };
    minimize(spec, init, &weighted, opt, options, &mut rng_from_seed(opt.seed))
}

/// Full-parameter training on the upstream task from a seeded initialization.
/// The outcome's `objective` divided by the row count is the final train loss.
pub fn pretrain(spec: &ModelSpec, upstream: &LabeledDataset, opt: &OptimizerConfig) -> Result<TrainOutcome> {
    if upstream.is_empty() {
        return invalid!("upstream dataset is empty");
    }
    spec.validate()?;
    let init = spec.init_params(&mut rng_from_seed(stream_seed(opt.seed, stream::INIT, 0)));
    train_unweighted(spec, &init, upstream, opt, &TrainOptions::default())
}

/// Copies the feature extractor of `theta_up` into `spec`, draws a fresh head
/// and trains only the head on `train`.
///
/// `theta_up` may come from a model with a different output size; its
/// feature-extractor span must match the one of `spec`.
pub fn linear_probe(
    spec: &ModelSpec,
    theta_up: &ParamVector,
    train: &LabeledDataset,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if theta_up.phi_span != spec.phi_span() {
        return invalid!(
            "upstream feature extractor spans {:?}, downstream model expects {:?}",
            theta_up.phi_span,
            spec.phi_span()
        );
    }
    let mut base = spec.zeros();
    base.values[spec.phi_span()].copy_from_slice(theta_up.phi());
    let init = spec.reinit_head(&base, &mut rng_from_seed(stream_seed(opt.seed, stream::INIT, 1)));
    let options = TrainOptions { trainable: Some(spec.head_span()), penalty: None };
    train_unweighted(spec, &init, train, opt, &options)
}

/// Labels every training input with the probed model's prediction.
pub fn make_base_measure(spec: &ModelSpec, probed: &ParamVector, inputs: &Matrix) -> Result<PseudoDataset> {
    let targets = if spec.is_classifier() {
        let probs = predict_proba(spec, probed, inputs)?;
        probs.iter_rows().map(|r| Target::Soft(r.to_vec())).collect()
    } else {
        let out = forward(spec, probed, inputs)?;
        out.iter_rows().map(|r| Target::Value(r[0])).collect()
    };
    Ok(PseudoDataset { inputs: inputs.clone(), targets })
}

/// `{0.01, 0.1, 1, 10, 100} * n / 100`.
pub fn default_alpha_grid(n: usize) -> Vec<f64> {
    [0.01, 0.1, 1.0, 10.0, 100.0].iter().map(|a| a * n as f64 / 100.0).collect()
}

pub const DEFAULT_SEARCH_SAMPLES: usize = 5;

/// Everything the alpha search runs the sampler on.
#[derive(Debug, Clone, Copy)]
pub struct AlphaSearch<'a> {
    pub spec: &'a ModelSpec,
    pub init: &'a ParamVector,
    pub train: &'a LabeledDataset,
    pub pseudo: &'a PseudoDataset,
    pub val: &'a LabeledDataset,
    /// Template for each candidate run; `alpha`, `samples` and `master_seed` are replaced.
    pub sampler: &'a SamplerConfig,
    pub samples: usize,
    pub master_seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub val_nll: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSelection {
    pub alpha: f64,
    pub table: Vec<AlphaRow>,
}

/// Scores each candidate by the BMA validation NLL of a short sampler run and
/// returns the minimizer, preferring the smaller alpha on ties.
///
/// Candidate `i` runs with master seed `stream_seed(master_seed, ALPHA_SEARCH, i)`.
pub fn select_alpha(grid: &[f64], search: &AlphaSearch) -> Result<AlphaSelection> {
    if grid.is_empty() {
        return invalid!("alpha grid is empty");
    }
    if let Some(a) = grid.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return invalid!("alpha grid entries must be finite and non-negative, got {a}");
    }
    if search.samples == 0 {
        return invalid!("alpha search needs at least one sample per candidate");
    }
    let labels = search.val.labels()?;
    let table = grid
        .par_iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let config = SamplerConfig {
                alpha,
                samples: search.samples,
                master_seed: stream_seed(search.master_seed, stream::ALPHA_SEARCH, i as u64),
                ..search.sampler.clone()
            };
            let ensemble = nptl_sample(search.spec, &config, search.init, search.train, search.pseudo, search.workers)?;
            let probs = bma_predict(search.spec, &ensemble.members, &search.val.features)?;
            Ok(AlphaRow { alpha, val_nll: metric_nll(&probs, &labels)?, members: ensemble.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = table
        .iter()
        .min_by(|a, b| a.val_nll.total_cmp(&b.val_nll).then(a.alpha.total_cmp(&b.alpha)))
        .expect("grid is nonempty");
    Ok(AlphaSelection { alpha: best.alpha, table })
}

pub fn write_alpha_table(path: impl AsRef<Path>, table: &[AlphaRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in table {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| NptlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_gaussian_mixture;
    use crate::inference::metric_acc;
    use crate::models::{weighted_loss, Activation};
    use crate::sampler::DrawScheme;

    fn opt(epochs: usize) -> OptimizerConfig {
        OptimizerConfig { base_lr: 0.1, epochs, batch_size: 32, seed: 3, ..Default::default() }
    }

    #[test]
    fn pretrain_zero_steps_and_determinism() {
        let spec = ModelSpec::mlp(2, &[8], 2, Activation::Relu);
        let data = gen_gaussian_mixture(2, 2, 100, 4.0, 1).unwrap();
        let zero = pretrain(&spec, &data, &opt(0)).unwrap();
        let init = spec.init_params(&mut rng_from_seed(stream_seed(3, stream::INIT, 0)));
        assert!(zero.params.bitwise_eq(&init));
        let a = pretrain(&spec, &data, &opt(2)).unwrap();
        let b = pretrain(&spec, &data, &opt(2)).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        assert!(pretrain(&spec, &data.subset(&[]), &opt(1)).is_err());
    }

    #[test]
    fn pretrain_separates_two_classes() {
        let spec = ModelSpec::mlp(2, &[16], 2, Activation::Relu);
        let data = gen_gaussian_mixture(2, 2, 400, 6.0, 2).unwrap();
        let out = pretrain(&spec, &data, &opt(10)).unwrap();
        let probs = predict_proba(&spec, &out.params, &data.features).unwrap();
        assert!(metric_acc(&probs, &data.labels().unwrap()).unwrap() >= 0.95);
    }

    #[test]
    fn probe_freezes_features() {
        let up = ModelSpec::mlp(2, &[8], 4, Activation::Swish);
        let down = ModelSpec::mlp(2, &[8], 2, Activation::Swish);
        let upstream = gen_gaussian_mixture(4, 2, 200, 4.0, 3).unwrap();
        let downstream = gen_gaussian_mixture(2, 2, 200, 4.0, 4).unwrap();
        let theta_up = pretrain(&up, &upstream, &opt(5)).unwrap().params;
        let probed = linear_probe(&down, &theta_up, &downstream, &opt(5)).unwrap().params;
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(probed.phi()), bits(theta_up.phi()));
        let probs = predict_proba(&down, &probed, &downstream.features).unwrap();
        assert!(metric_acc(&probs, &downstream.labels().unwrap()).unwrap() >= downstream.majority_rate());

        let other = ModelSpec::mlp(2, &[9], 2, Activation::Swish);
        assert!(linear_probe(&other, &theta_up, &downstream, &opt(1)).is_err());
    }

    #[test]
    fn probe_of_linear_model_is_full_training() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let data = gen_gaussian_mixture(2, 2, 100, 3.0, 5).unwrap();
        let probed = linear_probe(&spec, &spec.zeros(), &data, &opt(3)).unwrap();
        let init = spec.reinit_head(&spec.zeros(), &mut rng_from_seed(stream_seed(3, stream::INIT, 1)));
        let weights = vec![1.0; data.len()];
        let full = minimize(
            &spec,
            &init,
            &WeightedData { inputs: &data.features, targets: &data.targets, weights: &weights },
            &opt(3),
            &TrainOptions::default(),
            &mut rng_from_seed(3),
        )
        .unwrap();
        assert!(probed.params.bitwise_eq(&full.params));
    }

    #[test]
    fn base_measure_examples() {
        let spec = ModelSpec::mlp(3, &[4], 3, Activation::Relu);
        let mut params = spec.init_params(&mut rng_from_seed(1));
        let x = gen_gaussian_mixture(3, 3, 30, 2.0, 6).unwrap().features;
        let pseudo = make_base_measure(&spec, &params, &x).unwrap();
        assert_eq!(pseudo.len(), 30);
        assert_eq!(pseudo.inputs, x);
        let loss = weighted_loss(&spec, &params, &pseudo.inputs, &pseudo.targets, &[1.0; 30]).unwrap();
        assert!((loss - pseudo.entropy()).abs() < 1e-9 * loss.max(1.0));

        params.values[spec.head_span()].fill(0.0);
        let uniform = make_base_measure(&spec, &params, &x).unwrap();
        for t in &uniform.targets {
            let Target::Soft(p) = t else { panic!("soft target expected") };
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn alpha_selection_contract() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let data = gen_gaussian_mixture(2, 2, 120, 3.0, 7).unwrap();
        let (train, val) = (data.subset(&(0..100).collect::<Vec<_>>()), data.subset(&(100..120).collect::<Vec<_>>()));
        let probed = linear_probe(&spec, &spec.zeros(), &train, &opt(3)).unwrap().params;
        let pseudo = make_base_measure(&spec, &probed, &train.features).unwrap();
        let sampler = SamplerConfig { samples: 1, alpha: 0.0, scheme: DrawScheme::default(), opt: opt(2), master_seed: 0 };
        let search = AlphaSearch {
            spec: &spec,
            init: &probed,
            train: &train,
            pseudo: &pseudo,
            val: &val,
            sampler: &sampler,
            samples: 2,
            master_seed: 11,
            workers: 1,
        };
        assert_eq!(select_alpha(&[3.0], &search).unwrap().alpha, 3.0);
        let sel = select_alpha(&default_alpha_grid(100), &search).unwrap();
        let min = sel.table.iter().map(|r| r.val_nll).fold(f64::INFINITY, f64::min);
        assert_eq!(sel.table.iter().find(|r| r.alpha == sel.alpha).unwrap().val_nll, min);
        assert_eq!(select_alpha(&default_alpha_grid(100), &search).unwrap(), sel);
        assert!(select_alpha(&[1.0, -1.0], &search).is_err());
        assert!(select_alpha(&[], &search).is_err());
    }

    #[test]
    fn default_grid_scales_with_n() {
        assert_eq!(default_alpha_grid(100), vec![0.01, 0.1, 1.0, 10.0, 100.0]);
        assert_eq!(default_alpha_grid(200)[2], 2.0);
    }
}
