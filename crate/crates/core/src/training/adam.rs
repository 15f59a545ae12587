use crate::error::{Result, SpnError};
use crate::graph::ExecutionPlan;
use crate::inference::{backward_log_value, forward_with, LogValueGrads};
use crate::leaves::{gaussian_log_prob, EvidenceMask, VARIANCE_FLOOR};
use crate::parallel::Exec;
use crate::params::{AccumulatorSpace, LeafParams, ModelParams};
use crate::rng::indexed;
use crate::tensor::{argmax, logsumexp};

use super::config::TrainConfig;
use super::dropout::apply_product_dropout;

/// First and second moment estimates over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Flat view of the trainable parameters: every sum slot's log-space
/// accumulators, then (Gaussian leaves) the means, then the unconstrained
/// variance parameters `u = ln(var - floor)`.
pub fn flat_parameters(params: &ModelParams) -> Vec<f64> {
    let mut out: Vec<f64> = params
        .sums
        .iter()
        .flat_map(|s| s.accumulators().iter().copied())
        .collect();
    if let LeafParams::Gaussian(g) = &params.leaf {
        out.extend_from_slice(&g.means);
        out.extend(g.variances.iter().map(|v| (v - VARIANCE_FLOOR).ln()));
    }
    out
}

/// Inverse of [`flat_parameters`].
pub fn set_flat_parameters(params: &mut ModelParams, theta: &[f64]) -> Result<()> {
    if theta.len() != params.parameter_count() {
        return Err(SpnError::domain(format!(
            "{} values for {} parameters",
            theta.len(),
            params.parameter_count()
        )));
    }
    let mut off = 0;
    for s in &mut params.sums {
        let n = s.accumulators().len();
        s.accumulators_mut().copy_from_slice(&theta[off..off + n]);
        s.refresh();
        off += n;
    }
    if let LeafParams::Gaussian(g) = &mut params.leaf {
        let n = g.means.len();
        g.means.copy_from_slice(&theta[off..off + n]);
        off += n;
        for (v, u) in g.variances.iter_mut().zip(&theta[off..off + n]) {
            *v = VARIANCE_FLOOR + u.exp();
        }
    }
    Ok(())
}

/// Bias-corrected Adam update of `theta` against the gradient `grad`.
pub fn adam_update(state: &mut AdamState, config: &TrainConfig, theta: &mut [f64], grad: &[f64]) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
    }
}

/// Dropout rates and the coordinates that seed the per-sample masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutContext {
    pub product: f64,
    pub input: f64,
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    /// Mean cross-entropy over the samples with a finite loss.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

fn flat_gradient(params: &ModelParams, grads: &LogValueGrads, image: &[f64], mask: &EvidenceMask, out: &mut [f64]) {
    let mut off = 0;
    for (slot, s) in params.sums.iter().enumerate() {
        let n = s.inputs;
        let w = s.weights();
        for o in 0..s.outputs {
            let up = grads.upstream[slot][o];
            for i in 0..n {
                let j = o * n + i;
                out[off + j] += grads.log_weights[slot][j] - w[j] * up;
            }
        }
        off += s.inputs * s.outputs;
    }
    if let LeafParams::Gaussian(g) = &params.leaf {
        let k = g.components;
        let n = g.means.len();
        for (cell, &x) in image.iter().enumerate() {
            if !mask.observed[cell] {
                continue;
            }
            for c in cell * k..(cell + 1) * k {
                let gl = grads.leaf[c];
                if gl == 0.0 {
                    continue;
                }
                let var = g.variances[c];
                let d = x - g.means[c];
                out[off + c] += gl * d / var;
                let dvar = -0.5 / var + d * d / (2.0 * var * var);
                out[off + n + c] += gl * dvar * (var - VARIANCE_FLOOR);
            }
        }
    }
}

/// Mean cross-entropy of the class-sum softmax and its gradient with respect
/// to [`flat_parameters`]. Samples whose label output is -inf (every child
/// dropped) are left out of the loss and the gradient.
pub fn loss_gradient(
    plan: &ExecutionPlan,
    params: &ModelParams,
    images: &[Vec<f64>],
    labels: &[usize],
    dropout: Option<DropoutContext>,
    exec: Exec,
) -> Result<(BatchLoss, Vec<f64>)> {
    let class_op = plan
        .class_op()
        .ok_or_else(|| SpnError::Unsupported("gradient training needs class sums".into()))?;
    let classes = plan.classes().expect("class op");
    if labels.len() != images.len() {
        return Err(SpnError::domain(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(SpnError::domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if params.sums.iter().any(|s| s.space != AccumulatorSpace::Log) {
        return Err(SpnError::domain("gradient training needs log-space accumulators"));
    }
    let g = params
        .gaussian()
        .ok_or_else(|| SpnError::Unsupported("gradient training needs gaussian leaves".into()))?;
    let (h, w) = (plan.height(), plan.width());
    let scale = 1.0 / images.len().max(1) as f64;
    let n_params = params.parameter_count();

    let per_sample = exec.map(images, |i, image| -> Result<Option<(f64, bool, Vec<f64>)>> {
        let mut mask = EvidenceMask::all_observed(h, w);
        let mut rng = dropout.map(|d| indexed(d.seed, "dropout", &[d.epoch, d.batch, i as u64]));
        if let (Some(d), Some(rng)) = (dropout, rng.as_mut()) {
            if d.input > 0.0 {
                for o in &mut mask.observed {
                    *o = rand::Rng::random::<f64>(rng) >= d.input;
                }
            }
        }
        let leaf = gaussian_log_prob(image, g, &mask)?;
        let rate = dropout.map_or(0.0, |d| d.product);
        let trace = forward_with(plan, params, leaf, &mut |_, op, out| {
            if let Some(rng) = rng.as_mut() {
                apply_product_dropout(out, Some(&op.padding), rate, rng);
            }
        })?;
        let y = &trace.layers[class_op].data;
        let label = labels[i];
        let correct = argmax(y) == label;
        let lse = logsumexp(y);
        if y[label] == f64::NEG_INFINITY {
            return Ok(None);
        }
        let seed: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(k, &yk)| ((yk - lse).exp() - if k == label { 1.0 } else { 0.0 }) * scale)
            .collect();
        let grads = backward_log_value(plan, params, &trace, class_op, &seed);
        let mut flat = vec![0.0; n_params];
        flat_gradient(params, &grads, image, &mask, &mut flat);
        Ok(Some((lse - y[label], correct, flat)))
    });

    let mut grad = vec![0.0; n_params];
    let mut loss = 0.0;
    let mut counted = 0usize;
    let mut correct = 0usize;
    for r in per_sample {
        if let Some((l, ok, flat)) = r? {
            loss += l;
            counted += 1;
            correct += usize::from(ok);
            grad.iter_mut().zip(&flat).for_each(|(a, b)| *a += b);
        }
    }
    let stats = BatchLoss {
        loss: if counted > 0 { loss / counted as f64 } else { f64::NAN },
        correct,
        count: images.len(),
    };
    Ok((stats, grad))
}

/// One Adam step on a labelled batch.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    plan: &ExecutionPlan,
    params: &mut ModelParams,
    state: &mut AdamState,
    images: &[Vec<f64>],
    labels: &[usize],
    config: &TrainConfig,
    dropout: Option<DropoutContext>,
    exec: Exec,
) -> Result<BatchLoss> {
    let (stats, grad) = loss_gradient(plan, params, images, labels, dropout, exec)?;
    let mut theta = flat_parameters(params);
    if state.m.len() != theta.len() {
        return Err(SpnError::domain("adam state does not match the parameter count"));
    }
    adam_update(state, config, &mut theta, &grad);
    set_flat_parameters(params, &theta)?;
    Ok(stats)
}
