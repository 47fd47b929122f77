//! Minibatch SGD with momentum over weighted examples.
//!
//! The optimizer minimizes `sum_i w_i * loss_i (+ penalty)` but takes steps on
//! the objective divided by the number of examples, so learning rates do not
//! depend on the dataset size. The full objective is evaluated at the start
//! and after every epoch and the best iterate is returned.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NptlError, Result};
use crate::matrix::Matrix;
use crate::models::{net_kernel, ModelSpec, ParamVector, Target};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { base_lr: 0.05, schedule: Schedule::Cosine, momentum: 0.9, batch_size: 32, epochs: 20, seed: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return invalid!("learning rate must be positive, got {}", self.base_lr);
        }
        if self.batch_size == 0 {
            return invalid!("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid!("momentum must lie in [0, 1), got {}", self.momentum);
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Weighted examples, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct WeightedData<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a [Target],
    pub weights: &'a [f64],
}

impl WeightedData<'_> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.inputs.rows() != self.targets.len() || self.weights.len() != self.targets.len() {
            return invalid!(
                "weighted data sizes differ: {} inputs, {} targets, {} weights",
                self.inputs.rows(),
                self.targets.len(),
                self.weights.len()
            );
        }
        if self.inputs.rows() > 0 && self.inputs.cols() != spec.input_dim {
            return invalid!("input width {} does not match model input_dim {}", self.inputs.cols(), spec.input_dim);
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return invalid!("example weights must be finite and non-negative, got {w}");
        }
        self.targets.iter().try_for_each(|t| t.validate(spec))
    }
}

/// Quadratic pull `||theta - anchor||^2 / (2 beta)` toward `anchor`.
#[derive(Debug, Clone, Copy)]
pub struct L2sp<'a> {
    pub anchor: &'a ParamVector,
    pub beta: f64,
}

impl L2sp<'_> {
    fn value(&self, params: &ParamVector) -> f64 {
        params
            .values
            .iter()
            .zip(&self.anchor.values)
            .map(|(p, a)| (p - a) * (p - a))
            .sum::<f64>()
            / (2.0 * self.beta)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Coordinates that may change; `None` trains everything.
    pub trainable: Option<Range<usize>>,
    pub penalty: Option<L2sp<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub objective: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Full objective at the returned parameters.
    pub objective: f64,
    pub initial_objective: f64,
    /// Epoch whose iterate was returned; 0 means the initialization.
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub steps: usize,
}

/// Full weighted objective (data term plus optional penalty).
pub fn full_objective(spec: &ModelSpec, params: &ParamVector, data: &WeightedData, penalty: Option<&L2sp>) -> f64 {
    let loss = net_kernel(spec, params, data.inputs, data.targets, data.weights, 0..data.len(), None);
    loss + penalty.map_or(0.0, |p| p.value(params))
}

pub fn minimize(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &WeightedData,
    opt: &OptimizerConfig,
    options: &TrainOptions,
    rng: &mut SeededRng,
) -> Result<TrainOutcome> {
    spec.validate()?;
    spec.check_params(init)?;
    opt.validate()?;
    data.validate(spec)?;
    let trainable = options.trainable.clone().unwrap_or(0..init.len());
    if trainable.end > init.len() {
        return invalid!("trainable range {trainable:?} exceeds {} parameters", init.len());
    }
    if let Some(p) = &options.penalty {
        if !(p.beta > 0.0) {
            return invalid!("l2sp beta must be positive, got {}", p.beta);
        }
        if !p.anchor.same_layout(init) {
            return invalid!("l2sp anchor layout does not match the parameters");
        }
    }

    let penalty = options.penalty.as_ref();
    let initial_objective = full_objective(spec, init, data, penalty);
    if !initial_objective.is_finite() {
        return Err(NptlError::TrainingDiverged { step: 0, loss: initial_objective });
    }
    let mut best = (init.clone(), initial_objective, 0usize);
    let mut history = Vec::with_capacity(opt.epochs);
    let n = data.len();
    if n == 0 && penalty.is_none() {
        return Ok(TrainOutcome {
            params: init.clone(),
            objective: initial_objective,
            initial_objective,
            best_epoch: 0,
            history,
            steps: 0,
        });
    }

    let scale = 1.0 / n.max(1) as f64;
    let batches_per_epoch = n.div_ceil(opt.batch_size).max(1);
    let total_steps = batches_per_epoch * opt.epochs;
    let mut params = init.clone();
    let mut velocity = vec![0.0; trainable.len()];
    let mut grad = vec![0.0; init.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 1..=opt.epochs {
        order.shuffle(rng);
        let chunks: Vec<&[usize]> = if n == 0 { vec![&[]] } else { order.chunks(opt.batch_size).collect() };
        for batch in chunks {
            let lr = opt.lr_at(step, total_steps);
            step += 1;
            grad.fill(0.0);
            let batch_loss =
                net_kernel(spec, &params, data.inputs, data.targets, data.weights, batch.iter().copied(), Some(&mut grad));
            if !batch_loss.is_finite() {
                return Err(NptlError::TrainingDiverged { step, loss: batch_loss });
            }
            let batch_scale = if batch.is_empty() { 0.0 } else { 1.0 / batch.len() as f64 };
            for (k, j) in trainable.clone().enumerate() {
                velocity[k] = opt.momentum * velocity[k] + grad[j] * batch_scale;
                params.values[j] -= lr * velocity[k];
            }
            if let Some(p) = penalty {
                // implicit step on the quadratic penalty: stable for any beta
                let rho = lr * scale / p.beta;
                for j in trainable.clone() {
                    params.values[j] = (params.values[j] + rho * p.anchor.values[j]) / (1.0 + rho);
                }
            }
        }
        let objective = full_objective(spec, &params, data, penalty);
        if !objective.is_finite() {
            return Err(NptlError::TrainingDiverged { step, loss: objective });
        }
        history.push(EpochLog { epoch, objective, penalty: penalty.map_or(0.0, |p| p.value(&params)) });
        if objective < best.1 {
            best = (params.clone(), objective, epoch);
        }
    }

    Ok(TrainOutcome {
        params: best.0,
        objective: best.1,
        initial_objective,
        best_epoch: best.2,
        history,
        steps: step,
    })
}
