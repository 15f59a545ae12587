use crate::error::{Result, SpnError};
use crate::graph::{ExecutionPlan, Op};
use crate::inference::{forward_marginal, ForwardTrace};
use crate::parallel::Exec;
use crate::params::{AccumulatorSpace, ModelParams};
use crate::tensor::{argmax, patch_cells, weighted_argmax, LogTensor};

/// Additive smoothing with `eps = 1e-2 / n`, normalized over the smoothed
/// counts: `w_i = (c_i + eps) / sum_j (c_j + eps)`.
pub fn smooth_normalize(counts: &[f64]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(SpnError::domain("smoothing an empty count vector"));
    }
    let eps = 1e-2 / counts.len() as f64;
    let total: f64 = counts.iter().map(|c| c + eps).sum();
    Ok(counts.iter().map(|c| (c + eps) / total).collect())
}

/// Winner counts of one or more samples, one `[output][input]` matrix per sum
/// slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SumAccumulators {
    pub counts: Vec<Vec<f64>>,
}

impl SumAccumulators {
    pub fn zeros(plan: &ExecutionPlan) -> Self {
        SumAccumulators {
            counts: plan.sum_slots.iter().map(|s| vec![0.0; s.inputs * s.outputs]).collect(),
        }
    }

    pub fn add(&mut self, other: &SumAccumulators) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }
}

/// Top-down hard selection over a marginal trace. Every reached sum instance
/// picks one child, `argmax(log w_i + c_i)` or `argmax(c_i)` with `use_usi`,
/// and adds 1 to that child's count; products pass the selection to all of
/// their non-padding children. An instance reached by several parents is
/// counted once.
pub fn select_winners(
    plan: &ExecutionPlan,
    params: &ModelParams,
    trace: &ForwardTrace,
    use_usi: bool,
) -> SumAccumulators {
    let mut acc = SumAccumulators::zeros(plan);
    let last = plan.ops.len() - 1;
    let mut reach = vec![true; trace.layers[last].data.len()];
    let pick = |x: &[f64], log_w: &[f64]| {
        if use_usi {
            argmax(x)
        } else {
            weighted_argmax(x, log_w).1
        }
    };
    for i in (1..=last).rev() {
        let input = &trace.layers[i - 1];
        let mut reach_in = vec![false; input.data.len()];
        match &plan.ops[i] {
            Op::Leaf { .. } => unreachable!("leaf op only at position 0"),
            Op::FlatSum(f) => {
                let w = &params.sums[f.slot];
                let x: Vec<f64> = f.children.iter().map(|&e| input.data[e]).collect();
                let n = f.children.len();
                for o in (0..f.outputs).filter(|&o| reach[o]) {
                    let win = pick(&x, &w.log_weights()[o * n..(o + 1) * n]);
                    acc.counts[f.slot][o * n + win] += 1.0;
                    reach_in[f.children[win]] = true;
                }
            }
            Op::SpatialSum(s) => {
                let w = &params.sums[s.slot];
                let (ci, co) = (s.input.c, s.output.c);
                for cell in (0..s.input.cells()).filter(|&c| !s.padding[c]) {
                    let x = input.cell(cell);
                    for o in (0..co).filter(|&o| reach[cell * co + o]) {
                        let r = s.row_base(cell) + o;
                        let win = pick(x, &w.log_weights()[r * ci..(r + 1) * ci]);
                        acc.counts[s.slot][r * ci + win] += 1.0;
                        reach_in[cell * ci + win] = true;
                    }
                }
            }
            Op::Product(p) => {
                let (ci, co) = (p.input.c, p.output.c);
                let mut cells = vec![None; p.table.taps];
                for oi in 0..p.rows.output {
                    for oj in 0..p.cols.output {
                        let cell = oi * p.cols.output + oj;
                        if p.padding[cell] || !reach[cell * co..(cell + 1) * co].contains(&true) {
                            continue;
                        }
                        patch_cells(&p.rows, &p.cols, p.input.w, oi, oj, &mut cells);
                        for o in (0..co).filter(|&o| reach[cell * co + o]) {
                            for (c, &ch) in cells.iter().zip(p.table.row(o)) {
                                if let Some(c) = c {
                                    reach_in[c * ci + ch as usize] = true;
                                }
                            }
                        }
                    }
                }
            }
        }
        reach = reach_in;
    }
    acc
}

/// One online hard-EM step over a batch of leaf tensors: marginal forward
/// pass, winner selection, merge of the per-sample counts in sample order,
/// and a refresh of the smoothed weights. Returns the mean log-likelihood of
/// the batch under the weights before the update.
pub fn hard_em_step(
    plan: &ExecutionPlan,
    params: &mut ModelParams,
    batch: &[LogTensor],
    use_usi: bool,
    exec: Exec,
) -> Result<f64> {
    if plan.class_op().is_some() {
        return Err(SpnError::Unsupported(
            "hard EM needs a generative network without class sums".into(),
        ));
    }
    if params.sums.iter().any(|s| s.space != AccumulatorSpace::Counts) {
        return Err(SpnError::domain("hard EM needs count accumulators"));
    }
    if batch.is_empty() {
        return Err(SpnError::domain("empty batch"));
    }
    let shared: &ModelParams = params;
    let results = exec.map(batch, |_, leaf| -> Result<(f64, SumAccumulators)> {
        let (ll, trace) = forward_marginal(plan, shared, leaf.clone())?;
        Ok((ll, select_winners(plan, shared, &trace, use_usi)))
    });
    let mut delta = SumAccumulators::zeros(plan);
    let mut ll_sum = 0.0;
    for r in results {
        let (ll, acc) = r?;
        ll_sum += ll;
        delta.add(&acc);
    }
    for (w, d) in params.sums.iter_mut().zip(&delta.counts) {
        w.accumulators_mut().iter_mut().zip(d).for_each(|(a, b)| *a += b);
        w.refresh();
    }
    Ok(ll_sum / batch.len() as f64)
}
