//! Learnable state of a compiled network: one weight matrix per sum slot and
//! the leaf parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SpnError};
use crate::graph::{ExecutionPlan, LeafKind};
use crate::leaves::{gaussian_log_prob, indicator_log_prob, EvidenceMask, GaussianLeafParams};
use crate::tensor::{logsumexp, LogTensor, SumKernel};
use crate::training::smooth_normalize;

/// How the stored accumulators map to sum weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulatorSpace {
    /// The accumulators are the weights (not necessarily normalized).
    Linear,
    /// Nonnegative EM counts, turned into weights by additive smoothing.
    Counts,
    /// Log-space accumulators, turned into weights by a per-sum softmax.
    Log,
}

impl AccumulatorSpace {
    pub(crate) fn code(self) -> u32 {
        match self {
            AccumulatorSpace::Linear => 0,
            AccumulatorSpace::Counts => 1,
            AccumulatorSpace::Log => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(AccumulatorSpace::Linear),
            1 => Some(AccumulatorSpace::Counts),
            2 => Some(AccumulatorSpace::Log),
            _ => None,
        }
    }
}

/// Weights of one sum slot, stored row-major as `[output][input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SumWeights {
    pub inputs: usize,
    pub outputs: usize,
    pub space: AccumulatorSpace,
    accum: Vec<f64>,
    log_w: Vec<f64>,
    w: Vec<f64>,
}

impl SumWeights {
    pub fn new(inputs: usize, outputs: usize, space: AccumulatorSpace, accum: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 || accum.len() != inputs * outputs {
            return Err(SpnError::domain(format!(
                "sum weights {outputs}x{inputs} need {} accumulators, got {}",
                inputs * outputs,
                accum.len()
            )));
        }
        let bad = match space {
            AccumulatorSpace::Log => accum.iter().any(|a| !a.is_finite()),
            _ => accum.iter().any(|a| !a.is_finite() || *a < 0.0),
        };
        if bad {
            return Err(SpnError::domain("sum accumulators out of range for their space"));
        }
        let mut s = SumWeights {
            inputs,
            outputs,
            space,
            accum,
            log_w: Vec::new(),
            w: Vec::new(),
        };
        s.refresh();
        Ok(s)
    }

    pub fn uniform(inputs: usize, outputs: usize) -> Self {
        let n = inputs * outputs;
        Self::new(inputs, outputs, AccumulatorSpace::Linear, vec![1.0 / inputs as f64; n]).expect("uniform weights")
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accum
    }

    /// Mutable access; call [`SumWeights::refresh`] after editing.
    pub fn accumulators_mut(&mut self) -> &mut [f64] {
        &mut self.accum
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.w[o * self.inputs..(o + 1) * self.inputs]
    }

    pub fn kernel(&self) -> SumKernel<'_> {
        SumKernel {
            inputs: self.inputs,
            outputs: self.outputs,
            log_w: &self.log_w,
            w: &self.w,
        }
    }

    /// Recomputes the derived weights from the accumulators.
    pub fn refresh(&mut self) {
        let n = self.inputs;
        self.w.resize(self.accum.len(), 0.0);
        self.log_w.resize(self.accum.len(), 0.0);
        for o in 0..self.outputs {
            let acc = &self.accum[o * n..(o + 1) * n];
            let w = &mut self.w[o * n..(o + 1) * n];
            let log_w = &mut self.log_w[o * n..(o + 1) * n];
            match self.space {
                AccumulatorSpace::Linear => {
                    w.copy_from_slice(acc);
                    for (l, v) in log_w.iter_mut().zip(acc) {
                        *l = v.ln();
                    }
                }
                AccumulatorSpace::Counts => {
                    let normalized = smooth_normalize(acc).expect("non-empty sum");
                    w.copy_from_slice(&normalized);
                    for (l, v) in log_w.iter_mut().zip(w.iter()) {
                        *l = v.ln();
                    }
                }
                AccumulatorSpace::Log => {
                    let z = logsumexp(acc);
                    for ((l, v), a) in log_w.iter_mut().zip(w.iter_mut()).zip(acc) {
                        *l = a - z;
                        *v = l.exp();
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LeafParams {
    Gaussian(GaussianLeafParams),
    Indicator { arity: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub leaf: LeafParams,
    pub sums: Vec<SumWeights>,
}

impl ModelParams {
    /// Linear-space uniform weights (`1 / fan-in`) for every sum.
    pub fn uniform(plan: &ExecutionPlan, leaf: LeafParams) -> Result<Self> {
        let sums = plan
            .sum_slots
            .iter()
            .map(|s| SumWeights::uniform(s.inputs, s.outputs))
            .collect();
        let p = ModelParams { leaf, sums };
        p.check(plan)?;
        Ok(p)
    }

    /// EM counts drawn as `1 + 0.5 z`, `z` standard normal truncated to
    /// `[-2, 2]`. Identical initial counts would make every channel of a
    /// layer compute the same function and win the same samples forever.
    pub fn random_counts<R: Rng + ?Sized>(plan: &ExecutionPlan, leaf: LeafParams, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut sums = Vec::with_capacity(plan.sum_slots.len());
        for s in &plan.sum_slots {
            let accum = (0..s.inputs * s.outputs)
                .map(|_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 {
                        break 1.0 + 0.5 * z;
                    }
                })
                .collect();
            sums.push(SumWeights::new(s.inputs, s.outputs, AccumulatorSpace::Counts, accum)?);
        }
        let p = ModelParams { leaf, sums };
        p.check(plan)?;
        Ok(p)
    }

    /// Log-space accumulators drawn from `N(0, std^2)`.
    pub fn random_log<R: Rng + ?Sized>(plan: &ExecutionPlan, leaf: LeafParams, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| SpnError::domain(e.to_string()))?;
        let mut sums = Vec::with_capacity(plan.sum_slots.len());
        for s in &plan.sum_slots {
            let accum = (0..s.inputs * s.outputs).map(|_| normal.sample(rng)).collect();
            sums.push(SumWeights::new(s.inputs, s.outputs, AccumulatorSpace::Log, accum)?);
        }
        let p = ModelParams { leaf, sums };
        p.check(plan)?;
        Ok(p)
    }

    /// Verifies that the parameters fit the plan's slots and leaf layer.
    pub fn check(&self, plan: &ExecutionPlan) -> Result<()> {
        if self.sums.len() != plan.sum_slots.len() {
            return Err(SpnError::domain(format!(
                "plan has {} sum slots, parameters have {}",
                plan.sum_slots.len(),
                self.sums.len()
            )));
        }
        for (i, (s, slot)) in self.sums.iter().zip(&plan.sum_slots).enumerate() {
            if s.inputs != slot.inputs || s.outputs != slot.outputs {
                return Err(SpnError::domain(format!(
                    "sum slot {i} is {}x{}, parameters are {}x{}",
                    slot.outputs, slot.inputs, s.outputs, s.inputs
                )));
            }
        }
        match (&self.leaf, plan.leaf_kind()) {
            (LeafParams::Gaussian(g), LeafKind::Gaussian { components }) => {
                if g.components != components || g.height != plan.height() || g.width != plan.width() {
                    return Err(SpnError::domain("gaussian leaf parameters do not match the leaf layer"));
                }
            }
            (LeafParams::Indicator { arity }, LeafKind::Indicator { arity: a }) if *arity == a => {}
            _ => return Err(SpnError::domain("leaf parameters do not match the leaf layer kind")),
        }
        Ok(())
    }

    pub fn gaussian(&self) -> Option<&GaussianLeafParams> {
        match &self.leaf {
            LeafParams::Gaussian(g) => Some(g),
            LeafParams::Indicator { .. } => None,
        }
    }

    /// Leaf tensor of a real-valued image under `mask` (Gaussian leaves).
    pub fn gaussian_leaves(&self, image: &[f64], mask: &EvidenceMask) -> Result<LogTensor> {
        let g = self
            .gaussian()
            .ok_or_else(|| SpnError::Unsupported("real-valued evidence needs gaussian leaves".into()))?;
        gaussian_log_prob(image, g, mask)
    }

    /// Leaf tensor of a discrete assignment (indicator leaves).
    pub fn indicator_leaves(&self, height: usize, width: usize, assignment: &[Option<usize>]) -> Result<LogTensor> {
        match self.leaf {
            LeafParams::Indicator { arity } => indicator_log_prob(assignment, height, width, arity),
            LeafParams::Gaussian(_) => Err(SpnError::Unsupported("discrete evidence needs indicator leaves".into())),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let leaf = match &self.leaf {
            LeafParams::Gaussian(g) => g.means.len() + g.variances.len(),
            LeafParams::Indicator { .. } => 0,
        };
        leaf + self.sums.iter().map(|s| s.accum.len()).sum::<usize>()
    }
}
