//! End-to-end workflows shared by the command line and the test suites:
//! model initialization from data, occlusion inpainting with scoring, and
//! classification with a confusion matrix.

use crate::data::{apply_occlusion, denormalize, image_stats, mse_occluded, normalize, ImageDataset, OcclusionSpec};
use crate::error::{Result, SpnError};
use crate::graph::{ExecutionPlan, LeafKind};
use crate::inference::{batch_class_scores, inpaint, predict};
use crate::leaves::{equidistant_init, quantile_init};
use crate::parallel::Exec;
use crate::params::{LeafParams, ModelParams};
use crate::rng::substream;

fn gaussian_components(plan: &ExecutionPlan) -> Result<usize> {
    match plan.leaf_kind() {
        LeafKind::Gaussian { components } => Ok(components),
        LeafKind::Indicator { .. } => Err(SpnError::Unsupported("image training needs gaussian leaves".into())),
    }
}

/// Generative start: quantile leaves from the normalized training images and
/// randomly perturbed EM counts.
pub fn init_generative(plan: &ExecutionPlan, normalized: &[Vec<f64>], seed: u64) -> Result<ModelParams> {
    if plan.class_op().is_some() {
        return Err(SpnError::Unsupported(
            "generative training of a network with class sums".into(),
        ));
    }
    let k = gaussian_components(plan)?;
    let leaf = quantile_init(normalized, plan.height(), plan.width(), k)?;
    ModelParams::random_counts(plan, LeafParams::Gaussian(leaf), &mut substream(seed, "init"))
}

/// Discriminative start: equidistant means over `[-1.5, 1.5]` and log-space
/// accumulators drawn with standard deviation `std`.
pub fn init_discriminative(plan: &ExecutionPlan, seed: u64, std: f64) -> Result<ModelParams> {
    if plan.class_op().is_none() {
        return Err(SpnError::Unsupported("discriminative training needs class sums".into()));
    }
    let k = gaussian_components(plan)?;
    let leaf = equidistant_init(-1.5, 1.5, k, plan.height(), plan.width())?;
    ModelParams::random_log(plan, LeafParams::Gaussian(leaf), std, &mut substream(seed, "init"))
}

/// Completion of one raw image (pixel units) under `spec`: normalized with
/// the statistics of its observed pixels, inpainted, mapped back and clipped.
/// Observed pixels are copied from the input.
pub fn complete_image(
    plan: &ExecutionPlan,
    params: &ModelParams,
    raw: &[f64],
    spec: OcclusionSpec,
) -> Result<(Vec<f64>, Option<f64>)> {
    let mask = apply_occlusion(plan.height(), plan.width(), spec);
    if mask.hidden_count() == 0 {
        return Ok((raw.to_vec(), None));
    }
    let stats = image_stats(raw, Some(&mask));
    let z = normalize(raw, stats);
    let filled = inpaint(plan, params, &z, &mask)?;
    let mut out = denormalize(&filled, stats);
    for (i, v) in out.iter_mut().enumerate() {
        if mask.observed[i] {
            *v = raw[i];
        }
    }
    let mse = mse_occluded(&out, raw, &mask)?;
    Ok((out, Some(mse)))
}

#[derive(Debug, Clone)]
pub struct InpaintSummary {
    pub occlusion: OcclusionSpec,
    /// Mean over images of the per-image MSE on hidden pixels (0 when nothing
    /// is hidden).
    pub mse: f64,
    pub completions: Vec<Vec<f64>>,
}

pub fn inpaint_dataset(
    plan: &ExecutionPlan,
    params: &ModelParams,
    dataset: &ImageDataset,
    spec: OcclusionSpec,
    exec: Exec,
) -> Result<InpaintSummary> {
    if plan.class_op().is_some() {
        return Err(SpnError::Unsupported("inpainting needs a generative model".into()));
    }
    let images = dataset.images_f64();
    let results = exec
        .map(&images, |_, im| complete_image(plan, params, im, spec))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = results.len().max(1) as f64;
    let mse = results.iter().map(|(_, m)| m.unwrap_or(0.0)).sum::<f64>() / n;
    Ok(InpaintSummary {
        occlusion: spec,
        mse,
        completions: results.into_iter().map(|(c, _)| c).collect(),
    })
}

/// MSE of predicting every hidden pixel by the per-pixel training mean.
pub fn mean_baseline_mse(pixel_means: &[f64], test: &ImageDataset, spec: OcclusionSpec) -> Result<f64> {
    let mask = apply_occlusion(test.height, test.width, spec);
    let mut total = 0.0;
    for im in test.images_f64() {
        total += mse_occluded(pixel_means, &im, &mask)?;
    }
    Ok(total / test.n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Normalizes each image, scores it with the class sums and compares the
/// argmax (ties to the lowest class) with the labels.
pub fn classify_dataset(
    plan: &ExecutionPlan,
    params: &ModelParams,
    dataset: &ImageDataset,
    exec: Exec,
) -> Result<Classification> {
    let labels = dataset
        .labels_usize()
        .ok_or_else(|| SpnError::domain("classification needs labels"))?;
    let classes = plan
        .classes()
        .ok_or_else(|| SpnError::Unsupported("classification needs a discriminative model".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(SpnError::domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let (normalized, _) = crate::data::normalize_samplewise(dataset);
    let scores = batch_class_scores(plan, params, &normalized, exec)?;
    let predictions: Vec<usize> = scores.iter().map(|s| predict(s)).collect();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    for (&p, &l) in predictions.iter().zip(&labels) {
        confusion[l][p] += 1;
        correct += usize::from(p == l);
    }
    Ok(Classification {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        confusion,
        predictions,
    })
}
