//! Generative hard EM (weighted and unweighted-sum-input selection) and
//! discriminative Adam training with dropout.

mod adam;
mod config;
mod dropout;
mod em;

pub use adam::{
    adam_step, adam_update, flat_parameters, loss_gradient, set_flat_parameters, AdamState, BatchLoss, DropoutContext,
};
pub use config::{Progress, TrainConfig, TrainMode};
pub use dropout::{input_dropout, product_dropout};
pub use em::{hard_em_step, select_winners, smooth_normalize, SumAccumulators};

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Result, SpnError};
use crate::graph::ExecutionPlan;
use crate::leaves::EvidenceMask;
use crate::parallel::Exec;
use crate::params::ModelParams;
use crate::rng::indexed;

/// Sample order of one epoch; the last batch may be partial.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut indexed(seed, "shuffle", &[epoch as u64]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Online hard EM over fully observed images; leaf parameters stay fixed.
pub fn train_generative(
    plan: &ExecutionPlan,
    params: &mut ModelParams,
    images: &[Vec<f64>],
    config: &TrainConfig,
    exec: Exec,
    on_progress: &mut dyn FnMut(&Progress),
) -> Result<()> {
    config.validate()?;
    if !config.mode.is_generative() {
        return Err(SpnError::domain("generative training needs hard_em or hard_em_usi"));
    }
    let use_usi = config.mode == TrainMode::HardEmUsi;
    let mask = EvidenceMask::all_observed(plan.height(), plan.width());
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        for (b, idx) in epoch_batches(images.len(), config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let leaves = exec
                .map(idx, |_, &i| params.gaussian_leaves(&images[i], &mask))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let ll = hard_em_step(plan, params, &leaves, use_usi, exec)?;
            on_progress(&Progress {
                epoch,
                batch: b + 1,
                metric: "loglik",
                value: ll,
            });
        }
        on_progress(&Progress {
            epoch,
            batch: 0,
            metric: "seconds",
            value: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Adam on the class-sum cross-entropy with product and input dropout.
pub fn train_discriminative(
    plan: &ExecutionPlan,
    params: &mut ModelParams,
    images: &[Vec<f64>],
    labels: &[usize],
    config: &TrainConfig,
    exec: Exec,
    on_progress: &mut dyn FnMut(&Progress),
) -> Result<AdamState> {
    config.validate()?;
    if config.mode != TrainMode::Adam {
        return Err(SpnError::domain("discriminative training needs the adam mode"));
    }
    if labels.len() != images.len() {
        return Err(SpnError::domain("labels are required for discriminative training"));
    }
    let mut state = AdamState::new(params.parameter_count());
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let mut correct = 0;
        let mut seen = 0;
        for (b, idx) in epoch_batches(images.len(), config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let xs: Vec<Vec<f64>> = idx.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let ctx = DropoutContext {
                product: config.product_dropout,
                input: config.input_dropout,
                seed: config.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let stats = adam_step(plan, params, &mut state, &xs, &ys, config, Some(ctx), exec)?;
            correct += stats.correct;
            seen += stats.count;
            on_progress(&Progress {
                epoch,
                batch: b + 1,
                metric: "loss",
                value: stats.loss,
            });
        }
        on_progress(&Progress {
            epoch,
            batch: 0,
            metric: "train_accuracy",
            value: correct as f64 / seen.max(1) as f64,
        });
        on_progress(&Progress {
            epoch,
            batch: 0,
            metric: "seconds",
            value: start.elapsed().as_secs_f64(),
        });
    }
    Ok(state)
}
