use crate::error::{invalid, NptlError, Result};
use crate::matrix::Matrix;

use super::{LayerShape, ModelSpec, ParamVector, Target};

/// Probabilities below this are clamped inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-row activation buffers reused across rows.
struct Scratch {
    layers: Vec<LayerShape>,
    /// `pre[k]`: pre-activation output of layer `k`.
    pre: Vec<Vec<f64>>,
    /// `post[k]`: input to layer `k` (post[0] is the example itself).
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ModelSpec) -> Self {
        let layers = spec.layers();
        let pre = layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        let post = layers.iter().map(|l| vec![0.0; l.inputs]).collect();
        let delta = layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        Scratch { layers, pre, post, delta, log_probs: vec![0.0; spec.output_dim] }
    }

    fn forward(&mut self, spec: &ModelSpec, values: &[f64], x: &[f64]) {
        self.post[0].copy_from_slice(x);
        let depth = self.layers.len();
        for k in 0..depth {
            let layer = &self.layers[k];
            let w = &values[layer.weights()];
            let out = &mut self.pre[k];
            out.copy_from_slice(&values[layer.biases()]);
            for (i, &a) in self.post[k].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &w[i * layer.outputs..(i + 1) * layer.outputs];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += a * wv;
                }
            }
            if k + 1 < depth {
                for (dst, &z) in self.post[k + 1].iter_mut().zip(&self.pre[k]) {
                    *dst = spec.activation.apply(z);
                }
            }
        }
    }

    fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    /// Loss of the current forward pass; writes `d loss / d output` into the
    /// last delta buffer, scaled by `weight`.
    fn loss_and_output_delta(&mut self, target: &Target, weight: f64) -> f64 {
        let depth = self.layers.len();
        let out = &self.pre[depth - 1];
        let delta = &mut self.delta[depth - 1];
        match target {
            Target::Value(y) => {
                let r = out[0] - y;
                delta[0] = weight * r;
                0.5 * weight * r * r
            }
            Target::Class(_) | Target::Soft(_) => {
                log_softmax(out, &mut self.log_probs);
                let floor = LOG_FLOOR.ln();
                let mut loss = 0.0;
                let mut mass_unclamped = 0.0;
                delta.fill(0.0);
                let mut visit = |c: usize, p: f64| {
                    let lq = self.log_probs[c];
                    // NaN falls through to the unclamped branch so divergence surfaces
                    if !(lq < floor) {
                        loss -= p * lq;
                        mass_unclamped += p;
                        delta[c] -= p;
                    } else {
                        loss -= p * floor;
                    }
                };
                match target {
                    Target::Class(c) => visit(*c, 1.0),
                    Target::Soft(row) => {
                        for (c, &p) in row.iter().enumerate() {
                            if p > 0.0 {
                                visit(c, p);
                            }
                        }
                    }
                    Target::Value(_) => unreachable!(),
                }
                for (d, lq) in delta.iter_mut().zip(&self.log_probs) {
                    *d = weight * (*d + lq.exp() * mass_unclamped);
                }
                weight * loss
            }
        }
    }

    fn backward(&mut self, spec: &ModelSpec, values: &[f64], grad: &mut [f64]) {
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let outputs = layer.outputs;
            {
                let delta = &self.delta[k];
                let gw = &mut grad[layer.weights()];
                for (i, &a) in self.post[k].iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * outputs..(i + 1) * outputs];
                    for (g, d) in row.iter_mut().zip(delta) {
                        *g += a * d;
                    }
                }
                for (g, d) in grad[layer.biases()].iter_mut().zip(delta) {
                    *g += d;
                }
            }
            if k > 0 {
                let w = &values[layer.weights()];
                let (lower, upper) = self.delta.split_at_mut(k);
                let delta = &upper[0];
                let prev = &mut lower[k - 1];
                for (i, p) in prev.iter_mut().enumerate() {
                    let row = &w[i * outputs..(i + 1) * outputs];
                    let back: f64 = row.iter().zip(delta).map(|(wv, d)| wv * d).sum();
                    *p = back * spec.activation.derivative(self.pre[k - 1][i]);
                }
            }
        }
    }
}

fn log_softmax(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

fn check_inputs(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<()> {
    spec.validate()?;
    spec.check_params(params)?;
    if inputs.cols() != spec.input_dim {
        return invalid!("input width {} does not match model input_dim {}", inputs.cols(), spec.input_dim);
    }
    Ok(())
}

fn check_batch(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix, targets: &[Target], weights: &[f64]) -> Result<()> {
    check_inputs(spec, params, inputs)?;
    if targets.len() != inputs.rows() || weights.len() != inputs.rows() {
        return invalid!(
            "batch sizes differ: {} inputs, {} targets, {} weights",
            inputs.rows(),
            targets.len(),
            weights.len()
        );
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return invalid!("example weights must be finite and non-negative, got {w}");
    }
    for t in targets {
        t.validate(spec)?;
    }
    Ok(())
}

/// Raw model outputs: logits for classifiers, predictions for regression.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    check_inputs(spec, params, inputs)?;
    let mut scratch = Scratch::new(spec);
    let mut out = Matrix::zeros(inputs.rows(), spec.output_dim);
    for i in 0..inputs.rows() {
        scratch.forward(spec, &params.values, inputs.row(i));
        out.row_mut(i).copy_from_slice(scratch.output());
    }
    Ok(out)
}

/// Softmax predictive rows of a classifier.
pub fn predict_proba(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    if !spec.is_classifier() {
        return invalid!("predictive probabilities need a classifier, got {:?}", spec.architecture);
    }
    let mut logits = forward(spec, params, inputs)?;
    let mut buf = vec![0.0; spec.output_dim];
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        log_softmax(row, &mut buf);
        for (r, l) in row.iter_mut().zip(&buf) {
            *r = l.exp();
        }
    }
    Ok(logits)
}

/// `sum_i weights_i * loss(params; x_i, y_i)`.
pub fn weighted_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    targets: &[Target],
    weights: &[f64],
) -> Result<f64> {
    check_batch(spec, params, inputs, targets, weights)?;
    Ok(loss_grad_rows(spec, params, inputs, targets, weights, 0..inputs.rows(), None))
}

/// Gradient of [`weighted_loss`] with respect to every parameter.
pub fn weighted_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    targets: &[Target],
    weights: &[f64],
) -> Result<ParamVector> {
    weighted_loss_and_grad(spec, params, inputs, targets, weights).map(|(_, g)| g)
}

pub fn weighted_loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    targets: &[Target],
    weights: &[f64],
) -> Result<(f64, ParamVector)> {
    check_batch(spec, params, inputs, targets, weights)?;
    let mut grad = spec.zeros();
    let loss = loss_grad_rows(spec, params, inputs, targets, weights, 0..inputs.rows(), Some(&mut grad.values));
    Ok((loss, grad))
}

/// Unchecked kernel shared with the optimizer: accumulates the weighted loss
/// of the selected rows and, when `grad` is given, adds their gradient to it.
pub(crate) fn loss_grad_rows(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    targets: &[Target],
    weights: &[f64],
    rows: impl IntoIterator<Item = usize>,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let mut scratch = Scratch::new(spec);
    let mut total = 0.0;
    for i in rows {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        scratch.forward(spec, &params.values, inputs.row(i));
        total += scratch.loss_and_output_delta(&targets[i], w);
        if let Some(g) = grad.as_deref_mut() {
            scratch.backward(spec, &params.values, g);
        }
    }
    total
}

/// L2SP penalty `||params - anchor||^2 / (2 beta)` and its gradient `(params - anchor) / beta`.
pub fn l2sp_penalty(params: &ParamVector, anchor: &ParamVector, beta: f64) -> Result<(f64, Vec<f64>)> {
    if !(beta > 0.0) {
        return Err(NptlError::InvalidArgument(format!("l2sp beta must be positive, got {beta}")));
    }
    if params.values.len() != anchor.values.len() {
        return invalid!("params ({}) and anchor ({}) differ in length", params.values.len(), anchor.values.len());
    }
    let diff: Vec<f64> = params.values.iter().zip(&anchor.values).map(|(p, a)| p - a).collect();
    let penalty = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * beta);
    let grad = diff.into_iter().map(|d| d / beta).collect();
    Ok((penalty, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn central_difference(
        spec: &ModelSpec,
        params: &ParamVector,
        x: &Matrix,
        t: &[Target],
        w: &[f64],
        h: f64,
    ) -> Vec<f64> {
        (0..params.len())
            .map(|j| {
                let mut plus = params.clone();
                plus.values[j] += h;
                let mut minus = params.clone();
                minus.values[j] -= h;
                let lp = weighted_loss(spec, &plus, x, t, w).unwrap();
                let lm = weighted_loss(spec, &minus, x, t, w).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_model_outputs_zero() {
        let spec = ModelSpec::mlp(3, &[5], 2, Activation::Relu);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let out = forward(&spec, &spec.zeros(), &x).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_arithmetic() {
        let spec = ModelSpec::linear_regression(1);
        let params = spec.params_from(vec![2.0, 1.0]).unwrap();
        let out = forward(&spec, &params, &Matrix::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        assert_eq!(out.get(0, 0), 7.0);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let spec = ModelSpec::softmax_linear(1, 2);
        let p = predict_proba(&spec, &spec.zeros(), &Matrix::from_rows(&[vec![4.0]]).unwrap()).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(forward(&spec, &spec.zeros(), &x).is_err());
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(weighted_loss(&spec, &spec.zeros(), &x, &[Target::Class(0)], &[1.0, 1.0]).is_err());
        assert!(weighted_loss(&spec, &spec.zeros(), &x, &[Target::Class(0)], &[-1.0]).is_err());
    }

    #[test]
    fn hand_computed_nll() {
        // logits (ln 3, 0) -> p = (3/4, 1/4)
        let spec = ModelSpec::softmax_linear(1, 2);
        let params = spec.params_from(vec![0.0, 0.0, 3f64.ln(), 0.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let loss = weighted_loss(&spec, &params, &x, &[Target::Class(0)], &[1.0]).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-15);
        assert!((loss - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_loss_and_grad() {
        let spec = ModelSpec::mlp(2, &[4], 3, Activation::Swish);
        let params = spec.init_params(&mut rng_from_seed(1));
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let t = [Target::Class(0), Target::Soft(vec![0.2, 0.3, 0.5])];
        let (loss, grad) = weighted_loss_and_grad(&spec, &params, &x, &t, &[0.0, 0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn one_hot_soft_target_matches_hard_label() {
        let spec = ModelSpec::mlp(2, &[4], 3, Activation::Relu);
        let params = spec.init_params(&mut rng_from_seed(2));
        let x = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let hard = weighted_loss_and_grad(&spec, &params, &x, &[Target::Class(1)], &[1.0]).unwrap();
        let soft = weighted_loss_and_grad(&spec, &params, &x, &[Target::Soft(vec![0.0, 1.0, 0.0])], &[1.0]).unwrap();
        assert!((hard.0 - soft.0).abs() < 1e-14);
        for (a, b) in hard.1.values.iter().zip(&soft.1.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_prediction_is_floored() {
        let spec = ModelSpec::softmax_linear(1, 2);
        let params = spec.params_from(vec![0.0, 0.0, 100.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let (loss, grad) = weighted_loss_and_grad(&spec, &params, &x, &[Target::Class(1)], &[1.0]).unwrap();
        assert!((loss - (-LOG_FLOOR.ln())).abs() < 1e-12);
        assert!(grad.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_logits_give_nan_loss() {
        let spec = ModelSpec::softmax_linear(1, 2);
        let params = spec.params_from(vec![f64::INFINITY, 0.0, f64::INFINITY, 0.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let loss = weighted_loss(&spec, &params, &x, &[Target::Class(1)], &[1.0]).unwrap();
        assert!(loss.is_nan());
    }

    #[test]
    fn gradient_matches_finite_differences_2_16_3() {
        let spec = ModelSpec::mlp(2, &[16], 3, Activation::Swish);
        let mut rng = rng_from_seed(3);
        let params = spec.init_params(&mut rng);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let t = vec![
            Target::Class(0),
            Target::Class(2),
            Target::Soft(vec![0.1, 0.6, 0.3]),
            Target::Class(1),
            Target::Soft(vec![0.5, 0.5, 0.0]),
            Target::Class(2),
        ];
        let w = vec![1.0, 0.5, 2.0, 0.0, 1.5, 3.0];
        let analytic = weighted_grad(&spec, &params, &x, &t, &w).unwrap();
        let numeric = central_difference(&spec, &params, &x, &t, &w, 1e-5);
        for (a, f) in analytic.values.iter().zip(&numeric) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-3);
            assert!(rel < 1e-5, "analytic {a} numeric {f}");
        }
    }

    #[test]
    fn regression_gradient() {
        let spec = ModelSpec::linear_regression(2);
        let params = spec.params_from(vec![0.5, -1.0, 0.25]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        let t = [Target::Value(1.0), Target::Value(-2.0)];
        let w = [2.0, 1.0];
        let analytic = weighted_grad(&spec, &params, &x, &t, &w).unwrap();
        let numeric = central_difference(&spec, &params, &x, &t, &w, 1e-6);
        for (a, f) in analytic.values.iter().zip(&numeric) {
            assert!((a - f).abs() < 1e-7);
        }
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let spec = ModelSpec::mlp(2, &[5], 3, Activation::Relu);
        let params = spec.init_params(&mut rng_from_seed(5));
        let x = Matrix::from_rows(&[vec![0.2, 0.1], vec![1.0, -1.0]]).unwrap();
        let t = [Target::Class(0), Target::Class(2)];
        let g1 = weighted_grad(&spec, &params, &x, &t, &[1.0, 0.5]).unwrap();
        let g4 = weighted_grad(&spec, &params, &x, &t, &[4.0, 2.0]).unwrap();
        for (a, b) in g1.values.iter().zip(&g4.values) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn l2sp_examples() {
        let spec = ModelSpec::linear_regression(1);
        let a = spec.params_from(vec![3.0, 0.0]).unwrap();
        let b = spec.params_from(vec![1.0, 0.0]).unwrap();
        let (p, g) = l2sp_penalty(&a, &a, 1.0).unwrap();
        assert_eq!((p, g), (0.0, vec![0.0, 0.0]));
        let (p, g) = l2sp_penalty(&a, &b, 1.0).unwrap();
        assert_eq!(p, 2.0);
        assert_eq!(g, vec![2.0, 0.0]);
        let (p2, _) = l2sp_penalty(&a, &b, 2.0).unwrap();
        assert_eq!(p2, p / 2.0);
        assert!(l2sp_penalty(&a, &b, 0.0).is_err());
    }
}
