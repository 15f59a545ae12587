//! Execution of compiled plans: marginal and max-product forward passes, the
//! partition function, log-space root derivatives, leaf posteriors and
//! inpainting.

use crate::error::{Result, SpnError};
use crate::graph::{ExecutionPlan, FlatSumOp, Op, ProductOp, SpatialSumOp};
use crate::leaves::EvidenceMask;
use crate::parallel::Exec;
use crate::params::ModelParams;
use crate::tensor::{
    gclp_into, logaddexp, lse_exact, max_cell, patch_cells, scale_cell, spatial_sum_into, sum_cell, LogTensor, Shape,
    SumKernel, FAST_PATH_FLOOR,
};

/// Activations of every op; `layers[i]` is the output of op `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LogTensor>,
}

impl ForwardTrace {
    pub fn root(&self) -> f64 {
        self.layers.last().expect("non-empty trace").data[0]
    }
}

/// Max-product trace with the winning child of every sum node instance.
/// `winners[i]` is empty for ops that are not sums; for a spatial sum it is
/// laid out like the op output, for a flat sum it has one entry per output.
#[derive(Debug, Clone)]
pub struct MpeTrace {
    pub layers: Vec<LogTensor>,
    pub winners: Vec<Vec<u32>>,
}

fn check_leaf(plan: &ExecutionPlan, leaf: &LogTensor) -> Result<()> {
    if leaf.shape != plan.leaf_shape() {
        return Err(SpnError::domain(format!(
            "leaf tensor is {}, plan expects {}",
            leaf.shape,
            plan.leaf_shape()
        )));
    }
    Ok(())
}

fn flat_sum_forward(op: &FlatSumOp, input: &LogTensor, kernel: &SumKernel<'_>) -> LogTensor {
    let x: Vec<f64> = op.children.iter().map(|&e| input.data[e]).collect();
    let mut out = LogTensor::zeros(op_shape_flat(op));
    let mut scaled = vec![0.0; x.len()];
    sum_cell(&x, kernel, &mut out.data, &mut scaled);
    out
}

fn op_shape_flat(op: &FlatSumOp) -> Shape {
    Shape::new(1, 1, op.outputs)
}

/// Marginal forward pass with a hook applied to every product output (used
/// for dropout during training).
pub(crate) fn forward_with(
    plan: &ExecutionPlan,
    params: &ModelParams,
    leaf: LogTensor,
    product_hook: &mut dyn FnMut(usize, &ProductOp, &mut LogTensor),
) -> Result<ForwardTrace> {
    check_leaf(plan, &leaf)?;
    params.check(plan)?;
    let mut layers = Vec::with_capacity(plan.ops.len());
    layers.push(leaf);
    for (i, op) in plan.ops.iter().enumerate().skip(1) {
        let input = &layers[i - 1];
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaf op only at position 0"),
            Op::SpatialSum(s) => {
                let mut out = LogTensor::zeros(s.output);
                spatial_sum_into(input, &params.sums[s.slot].kernel(), s.local, &s.padding, &mut out);
                out
            }
            Op::Product(p) => {
                let mut out = LogTensor::zeros(p.output);
                gclp_into(input, &p.rows, &p.cols, &p.table, &mut out);
                product_hook(i, p, &mut out);
                out
            }
            Op::FlatSum(f) => flat_sum_forward(f, input, &params.sums[f.slot].kernel()),
        };
        layers.push(out);
    }
    Ok(ForwardTrace { layers })
}

/// Evaluates the network bottom-up with sum semantics. Returns the root log
/// value and the activations of every layer.
pub fn forward_marginal(plan: &ExecutionPlan, params: &ModelParams, leaf: LogTensor) -> Result<(f64, ForwardTrace)> {
    let trace = forward_with(plan, params, leaf, &mut |_, _, _| {})?;
    Ok((trace.root(), trace))
}

/// Log partition function: the root value with every variable hidden.
pub fn partition_function(plan: &ExecutionPlan, params: &ModelParams) -> Result<f64> {
    let leaf = LogTensor::zeros(plan.leaf_shape());
    Ok(forward_marginal(plan, params, leaf)?.0)
}

/// Max-product evaluation; ties between children go to the lowest index.
pub fn forward_mpe(plan: &ExecutionPlan, params: &ModelParams, leaf: LogTensor) -> Result<(f64, MpeTrace)> {
    check_leaf(plan, &leaf)?;
    params.check(plan)?;
    let mut layers = Vec::with_capacity(plan.ops.len());
    let mut winners = Vec::with_capacity(plan.ops.len());
    layers.push(leaf);
    winners.push(Vec::new());
    for (i, op) in plan.ops.iter().enumerate().skip(1) {
        let input = &layers[i - 1];
        let (out, win) = match op {
            Op::Leaf { .. } => unreachable!("leaf op only at position 0"),
            Op::SpatialSum(s) => {
                let kernel = params.sums[s.slot].kernel();
                let mut out = LogTensor::zeros(s.output);
                let mut win = vec![0u32; s.output.len()];
                let c = s.output.c;
                for cell in 0..s.input.cells() {
                    if s.padding[cell] {
                        continue;
                    }
                    max_cell(
                        input.cell(cell),
                        &kernel.block(s.row_base(cell), c),
                        &mut out.data[cell * c..(cell + 1) * c],
                        &mut win[cell * c..(cell + 1) * c],
                    );
                }
                (out, win)
            }
            Op::Product(p) => {
                let mut out = LogTensor::zeros(p.output);
                gclp_into(input, &p.rows, &p.cols, &p.table, &mut out);
                (out, Vec::new())
            }
            Op::FlatSum(f) => {
                let kernel = params.sums[f.slot].kernel();
                let x: Vec<f64> = f.children.iter().map(|&e| input.data[e]).collect();
                let mut out = LogTensor::zeros(op_shape_flat(f));
                let mut win = vec![0u32; f.outputs];
                max_cell(&x, &kernel, &mut out.data, &mut win);
                (out, win)
            }
        };
        layers.push(out);
        winners.push(win);
    }
    let root = layers.last().expect("root").data[0];
    Ok((root, MpeTrace { layers, winners }))
}

/// `g_in[i] = log sum_o exp(g_out[o]) w[o][i]` for one cell.
fn sum_backward_log(g_out: &[f64], kernel: &SumKernel<'_>, g_in: &mut [f64], scaled: &mut [f64]) {
    let m = scale_cell(g_out, scaled);
    if m == f64::NEG_INFINITY {
        g_in.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        return;
    }
    for (i, slot) in g_in.iter_mut().enumerate() {
        let mut s = 0.0;
        for (o, sc) in scaled.iter().enumerate() {
            s += sc * kernel.w[o * kernel.inputs + i];
        }
        *slot = if s >= FAST_PATH_FLOOR {
            m + s.ln()
        } else {
            let column: Vec<f64> = (0..kernel.outputs)
                .map(|o| kernel.log_w[o * kernel.inputs + i])
                .collect();
            lse_exact(g_out, &column)
        };
    }
}

fn product_backward_log(p: &ProductOp, input: &LogTensor, g_out: &LogTensor, g_in: &mut LogTensor) {
    let c_in = p.input.c;
    let taps = p.table.taps;
    let mut cells = vec![None; taps];
    let mut vals = vec![0.0; taps];
    for oi in 0..p.rows.output {
        for oj in 0..p.cols.output {
            let cell = oi * p.cols.output + oj;
            if p.padding[cell] {
                continue;
            }
            patch_cells(&p.rows, &p.cols, p.input.w, oi, oj, &mut cells);
            for o in 0..p.output.c {
                let g = g_out.data[cell * p.output.c + o];
                if g == f64::NEG_INFINITY {
                    continue;
                }
                let sel = p.table.row(o);
                for t in 0..taps {
                    vals[t] = match cells[t] {
                        Some(c) => input.data[c * c_in + sel[t] as usize],
                        None => 0.0,
                    };
                }
                for s in 0..taps {
                    let Some(c) = cells[s] else { continue };
                    let mut excl = 0.0;
                    for (t, v) in vals.iter().enumerate() {
                        if t != s {
                            excl += v;
                        }
                    }
                    let e = c * c_in + sel[s] as usize;
                    g_in.data[e] = logaddexp(g_in.data[e], g + excl);
                }
            }
        }
    }
}

/// Reverse pass in log space: returns `log dS/d(leaf channel)` for every leaf
/// channel, where `S` is the root value of `trace`.
pub fn backward_root_derivatives(
    plan: &ExecutionPlan,
    params: &ModelParams,
    trace: &ForwardTrace,
) -> Result<LogTensor> {
    if trace.layers.len() != plan.ops.len() {
        return Err(SpnError::domain("trace does not belong to this plan"));
    }
    let mut g = LogTensor::zeros(plan.ops.last().expect("root op").output_shape());
    for i in (1..plan.ops.len()).rev() {
        let input = &trace.layers[i - 1];
        let mut g_in = LogTensor::filled(input.shape, f64::NEG_INFINITY);
        match &plan.ops[i] {
            Op::Leaf { .. } => unreachable!("leaf op only at position 0"),
            Op::SpatialSum(s) => {
                let kernel = params.sums[s.slot].kernel();
                let mut scaled = vec![0.0; s.output.c];
                for cell in 0..s.input.cells() {
                    if s.padding[cell] {
                        continue;
                    }
                    let (go, gi) = (g.cell(cell), &mut g_in.data[cell * s.input.c..(cell + 1) * s.input.c]);
                    sum_backward_log(go, &kernel.block(s.row_base(cell), s.output.c), gi, &mut scaled);
                }
            }
            Op::Product(p) => product_backward_log(p, input, &g, &mut g_in),
            Op::FlatSum(f) => {
                let kernel = params.sums[f.slot].kernel();
                let mut scaled = vec![0.0; f.outputs];
                let mut gi = vec![0.0; f.children.len()];
                sum_backward_log(&g.data, &kernel, &mut gi, &mut scaled);
                for (&e, v) in f.children.iter().zip(gi) {
                    g_in.data[e] = v;
                }
            }
        }
        g = g_in;
    }
    Ok(g)
}

/// Gradients of a scalar objective with respect to the log value of every
/// node, pushed down to the sum weights and the leaves.
#[derive(Debug, Clone)]
pub(crate) struct LogValueGrads {
    /// Gradient with respect to each leaf log-density.
    pub leaf: Vec<f64>,
    /// Per sum slot, `[o][i]`: gradient with respect to `log w[o][i]`.
    pub log_weights: Vec<Vec<f64>>,
    /// Per sum slot and output: total upstream gradient of that sum.
    pub upstream: Vec<Vec<f64>>,
}

impl LogValueGrads {
    pub fn zeros(plan: &ExecutionPlan) -> Self {
        LogValueGrads {
            leaf: vec![0.0; plan.leaf_shape().len()],
            log_weights: plan.sum_slots.iter().map(|s| vec![0.0; s.inputs * s.outputs]).collect(),
            upstream: plan.sum_slots.iter().map(|s| vec![0.0; s.outputs]).collect(),
        }
    }
}

/// Accumulates the contribution of one sum instance: `x` are the child log
/// values, `s` the sum's log value, `g` its upstream gradient.
#[inline]
fn sum_instance_grad(x: &[f64], s: f64, g: f64, row: &[f64], dlw: &mut [f64], mut route: impl FnMut(usize, f64)) {
    for (j, (&xj, &wj)) in x.iter().zip(row).enumerate() {
        if xj == f64::NEG_INFINITY || wj == 0.0 {
            continue;
        }
        let r = wj * (xj - s).exp();
        let gr = g * r;
        dlw[j] += gr;
        route(j, gr);
    }
}

/// Linear backward pass of `sum_k seed[k] * log(value of node k of op start)`.
/// Ops after `start` are ignored. Products whose value is -inf (for example
/// dropped ones) pass no gradient.
pub(crate) fn backward_log_value(
    plan: &ExecutionPlan,
    params: &ModelParams,
    trace: &ForwardTrace,
    start: usize,
    seed: &[f64],
) -> LogValueGrads {
    let mut grads = LogValueGrads::zeros(plan);
    let mut g = seed.to_vec();
    for i in (1..=start).rev() {
        let input = &trace.layers[i - 1];
        let output = &trace.layers[i];
        let mut g_in = vec![0.0; input.data.len()];
        match &plan.ops[i] {
            Op::Leaf { .. } => unreachable!("leaf op only at position 0"),
            Op::SpatialSum(sp) => spatial_sum_backward_lin(sp, params, input, output, &g, &mut g_in, &mut grads),
            Op::Product(p) => {
                let c_in = p.input.c;
                let mut cells = vec![None; p.table.taps];
                for oi in 0..p.rows.output {
                    for oj in 0..p.cols.output {
                        let cell = oi * p.cols.output + oj;
                        if p.padding[cell] {
                            continue;
                        }
                        patch_cells(&p.rows, &p.cols, p.input.w, oi, oj, &mut cells);
                        for o in 0..p.output.c {
                            let idx = cell * p.output.c + o;
                            let go = g[idx];
                            if go == 0.0 || output.data[idx] == f64::NEG_INFINITY {
                                continue;
                            }
                            for (c, &ch) in cells.iter().zip(p.table.row(o)) {
                                if let Some(c) = c {
                                    g_in[c * c_in + ch as usize] += go;
                                }
                            }
                        }
                    }
                }
            }
            Op::FlatSum(f) => {
                let w = &params.sums[f.slot];
                let x: Vec<f64> = f.children.iter().map(|&e| input.data[e]).collect();
                let n = f.children.len();
                for o in 0..f.outputs {
                    let (go, s) = (g[o], output.data[o]);
                    if go == 0.0 || s == f64::NEG_INFINITY {
                        continue;
                    }
                    grads.upstream[f.slot][o] += go;
                    let dlw = &mut grads.log_weights[f.slot][o * n..(o + 1) * n];
                    sum_instance_grad(&x, s, go, w.row(o), dlw, |j, v| g_in[f.children[j]] += v);
                }
            }
        }
        g = g_in;
    }
    grads.leaf = g;
    grads
}

fn spatial_sum_backward_lin(
    sp: &SpatialSumOp,
    params: &ModelParams,
    input: &LogTensor,
    output: &LogTensor,
    g: &[f64],
    g_in: &mut [f64],
    grads: &mut LogValueGrads,
) {
    let w = &params.sums[sp.slot];
    let (ci, co) = (sp.input.c, sp.output.c);
    for cell in 0..sp.input.cells() {
        if sp.padding[cell] {
            continue;
        }
        let x = input.cell(cell);
        for o in 0..co {
            let idx = cell * co + o;
            let (go, s) = (g[idx], output.data[idx]);
            if go == 0.0 || s == f64::NEG_INFINITY {
                continue;
            }
            let r = sp.row_base(cell) + o;
            grads.upstream[sp.slot][r] += go;
            let dlw = &mut grads.log_weights[sp.slot][r * ci..(r + 1) * ci];
            let gi = &mut g_in[cell * ci..(cell + 1) * ci];
            sum_instance_grad(x, s, go, w.row(r), dlw, |j, v| gi[j] += v);
        }
    }
}

/// Posterior over the leaf components of every hidden variable.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPosterior {
    pub height: usize,
    pub width: usize,
    pub components: usize,
    /// `(cell, component)` layout; zero for observed variables.
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl LeafPosterior {
    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.components..(cell + 1) * self.components]
    }
}

/// Marginal posterior of the leaf components of each hidden variable, from
/// the root derivatives: hidden leaves hold the value 1, so their derivative
/// is the unnormalized marginal.
pub fn leaf_posterior(
    plan: &ExecutionPlan,
    params: &ModelParams,
    leaf: LogTensor,
    mask: &EvidenceMask,
) -> Result<LeafPosterior> {
    let shape = plan.leaf_shape();
    if mask.observed.len() != shape.cells() {
        return Err(SpnError::domain("evidence mask does not match the leaf grid"));
    }
    let k = shape.c;
    let mut values = vec![0.0; shape.len()];
    if mask.hidden_count() > 0 {
        let (_, trace) = forward_marginal(plan, params, leaf)?;
        let d = backward_root_derivatives(plan, params, &trace)?;
        for cell in 0..shape.cells() {
            if mask.observed[cell] {
                continue;
            }
            let lg = d.cell(cell);
            let m = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut values[cell * k..(cell + 1) * k];
            if m == f64::NEG_INFINITY {
                dst.iter_mut().for_each(|v| *v = 1.0 / k as f64);
                continue;
            }
            let mut z = 0.0;
            for (v, l) in dst.iter_mut().zip(lg) {
                *v = (l - m).exp();
                z += *v;
            }
            dst.iter_mut().for_each(|v| *v /= z);
        }
    } else {
        check_leaf(plan, &leaf)?;
    }
    Ok(LeafPosterior {
        height: shape.h,
        width: shape.w,
        components: k,
        values,
        observed: mask.observed.clone(),
    })
}

/// Completes the hidden pixels of a (normalized) image with the
/// posterior-weighted means of their leaf components.
pub fn inpaint(plan: &ExecutionPlan, params: &ModelParams, image: &[f64], mask: &EvidenceMask) -> Result<Vec<f64>> {
    let g = params
        .gaussian()
        .ok_or_else(|| SpnError::Unsupported("inpainting needs gaussian leaves".into()))?;
    let leaf = params.gaussian_leaves(image, mask)?;
    let post = leaf_posterior(plan, params, leaf, mask)?;
    let k = g.components;
    let mut out = image.to_vec();
    for (cell, px) in out.iter_mut().enumerate() {
        if mask.observed[cell] {
            continue;
        }
        *px = post
            .cell(cell)
            .iter()
            .zip(&g.means[cell * k..(cell + 1) * k])
            .map(|(p, m)| p * m)
            .sum();
    }
    Ok(out)
}

/// Root log-likelihood of every image under `mask`.
pub fn batch_log_likelihood(
    plan: &ExecutionPlan,
    params: &ModelParams,
    images: &[Vec<f64>],
    mask: &EvidenceMask,
    exec: Exec,
) -> Result<Vec<f64>> {
    exec.map(images, |_, im| {
        let leaf = params.gaussian_leaves(im, mask)?;
        Ok(forward_marginal(plan, params, leaf)?.0)
    })
    .into_iter()
    .collect()
}

/// Class-sum log outputs of every image.
pub fn batch_class_scores(
    plan: &ExecutionPlan,
    params: &ModelParams,
    images: &[Vec<f64>],
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let class_op = plan
        .class_op()
        .ok_or_else(|| SpnError::Unsupported("network has no class sums".into()))?;
    let mask = EvidenceMask::all_observed(plan.height(), plan.width());
    exec.map(images, |_, im| {
        let leaf = params.gaussian_leaves(im, &mask)?;
        let (_, trace) = forward_marginal(plan, params, leaf)?;
        Ok(trace.layers[class_op].data.clone())
    })
    .into_iter()
    .collect()
}

/// Completion of every image under its own mask.
pub fn batch_inpaint(
    plan: &ExecutionPlan,
    params: &ModelParams,
    images: &[Vec<f64>],
    masks: &[EvidenceMask],
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    if images.len() != masks.len() {
        return Err(SpnError::domain("one mask per image required"));
    }
    exec.map(images, |i, im| inpaint(plan, params, im, &masks[i]))
        .into_iter()
        .collect()
}

/// Index of the largest score, ties to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    crate::tensor::argmax(scores)
}
