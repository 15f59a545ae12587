use rand::Rng;

use crate::tensor::LogTensor;

/// Replaces each product output by -inf with probability `rate`. Cells
/// flagged in `padding` are constants and never dropped.
pub fn product_dropout<R: Rng + ?Sized>(
    mut t: LogTensor,
    padding: Option<&[bool]>,
    rate: f64,
    rng: &mut R,
) -> LogTensor {
    apply_product_dropout(&mut t, padding, rate, rng);
    t
}

pub(crate) fn apply_product_dropout<R: Rng + ?Sized>(
    t: &mut LogTensor,
    padding: Option<&[bool]>,
    rate: f64,
    rng: &mut R,
) {
    if rate <= 0.0 {
        return;
    }
    let c = t.shape.c;
    for cell in 0..t.shape.cells() {
        if padding.is_some_and(|p| p[cell]) {
            continue;
        }
        for v in &mut t.data[cell * c..(cell + 1) * c] {
            if rng.random::<f64>() < rate {
                *v = f64::NEG_INFINITY;
            }
        }
    }
}

/// Removes each variable from the evidence with probability `rate` by
/// setting all of its leaf channels to 0.0.
pub fn input_dropout<R: Rng + ?Sized>(mut t: LogTensor, rate: f64, rng: &mut R) -> LogTensor {
    apply_input_dropout(&mut t, rate, rng);
    t
}

pub(crate) fn apply_input_dropout<R: Rng + ?Sized>(t: &mut LogTensor, rate: f64, rng: &mut R) {
    if rate <= 0.0 {
        return;
    }
    for cell in 0..t.shape.cells() {
        if rng.random::<f64>() < rate {
            t.cell_mut(cell).iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
