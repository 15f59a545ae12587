//! Leaf layers: per-pixel Gaussian components and categorical indicators,
//! their initialization schemes and evidence handling.

use crate::error::{Result, SpnError};
use crate::tensor::{LogTensor, Shape};

/// Lower bound applied to every Gaussian variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Observed/hidden flag per variable (`true` = observed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceMask {
    pub height: usize,
    pub width: usize,
    pub observed: Vec<bool>,
}

impl EvidenceMask {
    pub fn all_observed(height: usize, width: usize) -> Self {
        EvidenceMask {
            height,
            width,
            observed: vec![true; height * width],
        }
    }

    pub fn all_hidden(height: usize, width: usize) -> Self {
        EvidenceMask {
            height,
            width,
            observed: vec![false; height * width],
        }
    }

    pub fn hidden_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn is_observed(&self, var: usize) -> bool {
        self.observed[var]
    }
}

/// Means and variances of `components` univariate Gaussians per pixel,
/// laid out `(i, j, k)` like the leaf tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLeafParams {
    pub height: usize,
    pub width: usize,
    pub components: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianLeafParams {
    pub fn new(height: usize, width: usize, components: usize, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let n = height * width * components;
        if means.len() != n || variances.len() != n {
            return Err(SpnError::domain(format!(
                "gaussian leaf {height}x{width}x{components} needs {n} means and variances"
            )));
        }
        if means.iter().chain(&variances).any(|v| !v.is_finite()) {
            return Err(SpnError::domain("gaussian leaf parameters must be finite"));
        }
        let mut p = GaussianLeafParams {
            height,
            width,
            components,
            means,
            variances,
        };
        p.clamp_variances();
        Ok(p)
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.components)
    }

    pub fn clamp_variances(&mut self) {
        for v in &mut self.variances {
            if *v < VARIANCE_FLOOR {
                *v = VARIANCE_FLOOR;
            }
        }
    }
}

#[inline]
pub fn gaussian_log_density(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln()) - d * d / (2.0 * variance)
}

/// Leaf tensor for a real-valued image. Hidden variables get 0.0 (log 1) in
/// every component, which marginalizes them out.
pub fn gaussian_log_prob(image: &[f64], params: &GaussianLeafParams, mask: &EvidenceMask) -> Result<LogTensor> {
    let cells = params.height * params.width;
    if image.len() != cells || mask.observed.len() != cells {
        return Err(SpnError::domain(format!(
            "image has {} pixels and mask {} flags, leaf grid is {}x{}",
            image.len(),
            mask.observed.len(),
            params.height,
            params.width
        )));
    }
    if let Some(bad) = image.iter().position(|v| !v.is_finite()) {
        return Err(SpnError::domain(format!("pixel {bad} is not finite")));
    }
    let k = params.components;
    let mut out = LogTensor::zeros(params.shape());
    for (cell, &x) in image.iter().enumerate() {
        if !mask.observed[cell] {
            continue;
        }
        let base = cell * k;
        for c in 0..k {
            out.data[base + c] = gaussian_log_density(x, params.means[base + c], params.variances[base + c]);
        }
    }
    Ok(out)
}

/// Per-pixel quantile initialization: the sorted training values of each pixel
/// are split into `components` groups of equal size (the first groups take
/// one extra value when the count does not divide), group means become the
/// component means; variances are 1.
pub fn quantile_init<I: AsRef<[f64]>>(
    images: &[I],
    height: usize,
    width: usize,
    components: usize,
) -> Result<GaussianLeafParams> {
    if images.is_empty() {
        return Err(SpnError::domain("quantile initialization needs a non-empty dataset"));
    }
    if components == 0 || images.len() < components {
        return Err(SpnError::domain(format!(
            "{} samples cannot fill {components} quantile groups",
            images.len()
        )));
    }
    let cells = height * width;
    if let Some(bad) = images.iter().position(|im| im.as_ref().len() != cells) {
        return Err(SpnError::domain(format!("image {bad} does not have {cells} pixels")));
    }
    let n = images.len();
    let base = n / components;
    let extra = n % components;
    let mut means = vec![0.0; cells * components];
    let mut column = vec![0.0; n];
    for cell in 0..cells {
        for (dst, im) in column.iter_mut().zip(images) {
            *dst = im.as_ref()[cell];
        }
        column.sort_by(f64::total_cmp);
        let mut start = 0;
        for g in 0..components {
            let len = base + usize::from(g < extra);
            let group = &column[start..start + len];
            means[cell * components + g] = group.iter().sum::<f64>() / len as f64;
            start += len;
        }
    }
    GaussianLeafParams::new(height, width, components, means, vec![1.0; cells * components])
}

/// Means at the midpoints of `components` equal intervals of `[lo, hi]`,
/// identical for every pixel; variances are 1.
pub fn equidistant_init(
    lo: f64,
    hi: f64,
    components: usize,
    height: usize,
    width: usize,
) -> Result<GaussianLeafParams> {
    if !(lo < hi) || components == 0 {
        return Err(SpnError::domain(
            "equidistant initialization needs lo < hi and at least one component",
        ));
    }
    let step = (hi - lo) / components as f64;
    let row: Vec<f64> = (0..components).map(|k| lo + (k as f64 + 0.5) * step).collect();
    let cells = height * width;
    let means = row.iter().copied().cycle().take(cells * components).collect();
    GaussianLeafParams::new(height, width, components, means, vec![1.0; cells * components])
}

/// Indicator leaf tensor: the observed value's channel is 0.0 and the others
/// are -inf; a hidden variable (`None`) has every channel at 0.0.
pub fn indicator_log_prob(
    assignment: &[Option<usize>],
    height: usize,
    width: usize,
    arity: usize,
) -> Result<LogTensor> {
    if assignment.len() != height * width {
        return Err(SpnError::domain(format!(
            "assignment has {} values, grid is {height}x{width}",
            assignment.len()
        )));
    }
    let mut out = LogTensor::zeros(Shape::new(height, width, arity));
    for (cell, value) in assignment.iter().enumerate() {
        if let Some(v) = *value {
            if v >= arity {
                return Err(SpnError::domain(format!(
                    "variable {cell} has value {v}, arity is {arity}"
                )));
            }
            for (c, slot) in out.cell_mut(cell).iter_mut().enumerate() {
                *slot = if c == v { 0.0 } else { f64::NEG_INFINITY };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_pixel(mean: f64, var: f64) -> GaussianLeafParams {
        GaussianLeafParams::new(1, 1, 1, vec![mean], vec![var]).unwrap()
    }

    #[test]
    fn density_at_mean_and_one_sigma() {
        let p = one_pixel(0.3, 1.0);
        let m = EvidenceMask::all_observed(1, 1);
        let at_mean = gaussian_log_prob(&[0.3], &p, &m).unwrap().data[0];
        assert!((at_mean - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        let off = gaussian_log_prob(&[1.3], &p, &m).unwrap().data[0];
        assert!((off - (-1.418_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn hidden_pixel_is_log_one() {
        let p = GaussianLeafParams::new(1, 2, 3, vec![0.0; 6], vec![1.0; 6]).unwrap();
        let mask = EvidenceMask {
            height: 1,
            width: 2,
            observed: vec![true, false],
        };
        let t = gaussian_log_prob(&[5.0, 5.0], &p, &mask).unwrap();
        assert!(t.cell(0).iter().all(|v| *v < 0.0));
        assert_eq!(t.cell(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_pixel_rejected() {
        let p = one_pixel(0.0, 1.0);
        assert!(gaussian_log_prob(&[f64::NAN], &p, &EvidenceMask::all_observed(1, 1)).is_err());
    }

    #[test]
    fn variance_floor_is_enforced() {
        let p = one_pixel(0.0, 1e-9);
        assert_eq!(p.variances[0], VARIANCE_FLOOR);
    }

    #[test]
    fn quantile_means_by_hand() {
        let images: Vec<Vec<f64>> = [5.0, 1.0, 7.0, 0.0, 3.0, 2.0, 6.0, 4.0]
            .iter()
            .map(|v| vec![*v])
            .collect();
        let p = quantile_init(&images, 1, 1, 4).unwrap();
        assert_eq!(p.means, vec![0.5, 2.5, 4.5, 6.5]);
        assert_eq!(p.variances, vec![1.0; 4]);

        let single = quantile_init(&images, 1, 1, 1).unwrap();
        assert_eq!(single.means, vec![3.5]);

        let constant: Vec<Vec<f64>> = vec![vec![2.25]; 9];
        assert_eq!(quantile_init(&constant, 1, 1, 4).unwrap().means, vec![2.25; 4]);
    }

    #[test]
    fn quantile_remainder_goes_to_first_groups() {
        // 5 values, 2 groups: {0,1,2} and {3,4}
        let images: Vec<Vec<f64>> = (0..5).map(|v| vec![v as f64]).collect();
        assert_eq!(quantile_init(&images, 1, 1, 2).unwrap().means, vec![1.0, 3.5]);
    }

    #[test]
    fn quantile_errors() {
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(quantile_init(&empty, 1, 1, 4).is_err());
        assert!(quantile_init(&[vec![1.0]], 1, 1, 2).is_err());
    }

    #[test]
    fn equidistant_midpoints() {
        let p = equidistant_init(-1.5, 1.5, 2, 1, 1).unwrap();
        assert_eq!(p.means, vec![-0.75, 0.75]);
        let p = equidistant_init(-1.5, 1.5, 3, 2, 1).unwrap();
        assert_eq!(p.means, vec![-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        let p = equidistant_init(-1.5, 1.5, 1, 1, 1).unwrap();
        assert_eq!(p.means, vec![0.0]);
        assert!(equidistant_init(1.0, 1.0, 2, 1, 1).is_err());
    }

    #[test]
    fn indicator_channels() {
        let t = indicator_log_prob(&[Some(1), None, Some(2)], 1, 3, 4).unwrap();
        assert_eq!(
            t.cell(0),
            &[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]
        );
        assert_eq!(t.cell(1), &[0.0; 4]);
        assert_eq!(
            t.cell(2),
            &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]
        );
        let binary = indicator_log_prob(&[Some(1)], 1, 1, 2).unwrap();
        assert_eq!(binary.data, vec![f64::NEG_INFINITY, 0.0]);
        assert!(indicator_log_prob(&[Some(4)], 1, 1, 4).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        for &(mean, var) in &[(0.0, 1.0), (1.3, 0.05), (-2.0, 4.0)] {
            let sd: f64 = f64::sqrt(var);
            let (lo, hi) = (mean - 12.0 * sd, mean + 12.0 * sd);
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let total: f64 = (0..=n)
                .map(|i| {
                    let x = lo + i as f64 * h;
                    let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
                    wgt * gaussian_log_density(x, mean, var).exp()
                })
                .sum::<f64>()
                * h;
            assert!((total - 1.0).abs() < 1e-3, "mean {mean} var {var}: {total}");
        }
    }

    proptest! {
        #[test]
        fn fully_hidden_leaves_are_zero(vals in proptest::collection::vec(-3.0f64..3.0, 6),
                                        assignment in proptest::collection::vec(0usize..3, 6)) {
            let p = GaussianLeafParams::new(2, 3, 2, vals.iter().chain(&vals).copied().collect(), vec![0.5; 12]).unwrap();
            let t = gaussian_log_prob(&vals, &p, &EvidenceMask::all_hidden(2, 3)).unwrap();
            prop_assert!(t.data.iter().all(|v| *v == 0.0));
            let _ = assignment;
            let hidden = vec![None; 6];
            let t = indicator_log_prob(&hidden, 2, 3, 3).unwrap();
            prop_assert!(t.data.iter().all(|v| *v == 0.0));
        }

        #[test]
        fn quantile_means_non_decreasing(data in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 4..30),
                                         k in 1usize..5) {
            prop_assume!(data.len() >= k);
            let p = quantile_init(&data, 1, 3, k).unwrap();
            for cell in 0..3 {
                let m = &p.means[cell * k..(cell + 1) * k];
                prop_assert!(m.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
