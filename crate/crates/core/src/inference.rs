//! Bayesian model averaging, evaluation metrics and greedy weight soups.

use std::fs::OpenOptions;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NptlError, Result};
use crate::matrix::Matrix;
use crate::models::{predict_proba, ModelSpec, ParamVector, LOG_FLOOR};

/// Average of the members' predictive probability rows.
pub fn bma_predict(spec: &ModelSpec, members: &[ParamVector], inputs: &Matrix) -> Result<Matrix> {
    let Some(first) = members.first() else {
        return invalid!("cannot average an empty ensemble");
    };
    if let Some(m) = members.iter().position(|m| !m.same_layout(first)) {
        return invalid!("ensemble member {m} has a different layout from member 0");
    }
    let probs = members.par_iter().map(|m| predict_proba(spec, m, inputs)).collect::<Result<Vec<_>>>()?;
    let mut acc = Matrix::zeros(inputs.rows(), spec.output_dim);
    for p in &probs {
        for i in 0..acc.rows() {
            for (a, v) in acc.row_mut(i).iter_mut().zip(p.row(i)) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / members.len() as f64;
    for i in 0..acc.rows() {
        acc.row_mut(i).iter_mut().for_each(|a| *a *= scale);
    }
    Ok(acc)
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return invalid!("{} probability rows but {} labels", probs.rows(), labels.len());
    }
    if labels.is_empty() {
        return invalid!("metrics need at least one row");
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= probs.cols()) {
        return invalid!("label {c} out of range for {} classes", probs.cols());
    }
    Ok(())
}

/// First index of the largest entry.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean negative log-probability of the true class, floored at `1e-12`.
/// Clamps at the log floor; NaN passes through.
fn floored(p: f64) -> f64 {
    if p < LOG_FLOOR {
        LOG_FLOOR
    } else {
        p
    }
}

pub fn metric_nll(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels.iter().enumerate().map(|(i, &c)| -floored(probs.get(i, c)).ln()).sum();
    Ok(total / labels.len() as f64)
}

pub fn metric_acc(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = labels.iter().enumerate().filter(|&(i, &c)| argmax(probs.row(i)) == c).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins.
///
/// A confidence of exactly 1 falls in the last bin; bin `b` otherwise holds
/// confidences in `[b/bins, (b+1)/bins)`.
pub fn metric_ece(probs: &Matrix, labels: &[usize], bins: usize) -> Result<f64> {
    check_labels(probs, labels)?;
    if bins == 0 {
        return invalid!("ece needs at least one bin");
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (i, &c) in labels.iter().enumerate() {
        let row = probs.row(i);
        let k = argmax(row);
        let p = row[k];
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        hits[b] += f64::from(u8::from(k == c));
    }
    let n = labels.len() as f64;
    Ok((0..bins).filter(|&b| count[b] > 0).map(|b| (hits[b] - conf[b]).abs() / n).sum())
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub members: usize,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
}

impl EvalReport {
    pub fn from_probs(
        method: &str,
        dataset: &str,
        seed: u64,
        members: usize,
        probs: &Matrix,
        labels: &[usize],
        bins: usize,
    ) -> Result<Self> {
        Ok(EvalReport {
            method: method.to_owned(),
            dataset: dataset.to_owned(),
            seed,
            members,
            acc: metric_acc(probs, labels)?,
            nll: metric_nll(probs, labels)?,
            ece: metric_ece(probs, labels, bins)?,
        })
    }
}

/// Appends rows to a CSV table, writing the header when the file is new or empty.
pub fn append_results(path: impl AsRef<Path>, rows: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| NptlError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| NptlError::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(NptlError::from)).collect()
}

/// Per-method, per-dataset mean and sample standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub dataset: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub ece_mean: f64,
    pub ece_std: f64,
}

/// Mean and sample (n - 1) standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (method, dataset) in order of first appearance.
pub fn summarize(rows: &[EvalReport]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return invalid!("no results rows to summarize");
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.dataset.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    Ok(keys
        .into_iter()
        .map(|(method, dataset)| {
            let group: Vec<&EvalReport> = rows.iter().filter(|r| r.method == method && r.dataset == dataset).collect();
            let col = |f: fn(&EvalReport) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (acc_mean, acc_std) = col(|r| r.acc);
            let (nll_mean, nll_std) = col(|r| r.nll);
            let (ece_mean, ece_std) = col(|r| r.ece);
            SummaryRow { method, dataset, runs: group.len(), acc_mean, acc_std, nll_mean, nll_std, ece_mean, ece_std }
        })
        .collect())
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| NptlError::io(path, e))
}

/// Validation metric driving greedy acceptance. Lower is better for NLL,
/// higher for accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoupMetric {
    #[default]
    Nll,
    Acc,
}

impl SoupMetric {
    fn score(self, probs: &Matrix, labels: &[usize]) -> Result<f64> {
        match self {
            SoupMetric::Nll => metric_nll(probs, labels),
            SoupMetric::Acc => metric_acc(probs, labels),
        }
    }

    /// `a` is at least as good as `b`.
    fn not_worse(self, a: f64, b: f64) -> bool {
        match self {
            SoupMetric::Nll => a <= b,
            SoupMetric::Acc => a >= b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoupResult {
    pub params: ParamVector,
    /// Member indices in the order they entered the soup.
    pub accepted: Vec<usize>,
    /// Metric of the soup after each candidate, starting with the best member alone.
    pub trajectory: Vec<SoupStep>,
    pub metric: SoupMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupStep {
    pub candidate: usize,
    pub accepted: bool,
    pub candidate_score: f64,
    pub soup_score: f64,
}

/// Greedy soup: rank members by validation metric, start from the best and
/// keep each further member only if the uniform average does not get worse.
pub fn greedy_soup(
    spec: &ModelSpec,
    members: &[ParamVector],
    val_inputs: &Matrix,
    val_labels: &[usize],
    metric: SoupMetric,
) -> Result<SoupResult> {
    if members.is_empty() {
        return invalid!("cannot build a soup from an empty ensemble");
    }
    let scores = members
        .par_iter()
        .map(|m| metric.score(&predict_proba(spec, m, val_inputs)?, val_labels))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..members.len()).collect();
    // stable sort keeps the original order among ties
    order.sort_by(|&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        match metric {
            SoupMetric::Nll => x.total_cmp(&y),
            SoupMetric::Acc => y.total_cmp(&x),
        }
    });

    let best = order[0];
    let mut accepted = vec![best];
    let mut soup = members[best].clone();
    let mut soup_score = scores[best];
    let mut trajectory = vec![SoupStep { candidate: best, accepted: true, candidate_score: scores[best], soup_score }];
    for &c in &order[1..] {
        let trial = ParamVector::average(accepted.iter().chain([&c]).map(|&i| &members[i]))?;
        let trial_score = metric.score(&predict_proba(spec, &trial, val_inputs)?, val_labels)?;
        let keep = metric.not_worse(trial_score, soup_score);
        if keep {
            accepted.push(c);
            soup = trial;
            soup_score = trial_score;
        }
        trajectory.push(SoupStep { candidate: c, accepted: keep, candidate_score: scores[c], soup_score });
    }
    Ok(SoupResult { params: soup, accepted, trajectory, metric })
}

pub fn write_soup_trajectory(path: impl AsRef<Path>, soup: &SoupResult) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for s in &soup.trajectory {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| NptlError::io(path, e))
}
