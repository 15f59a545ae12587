//! Dense log-space tensors and the two layer primitives built on them:
//! weighted log-sum-exp over the channels of a cell, and the dilated,
//! strided product convolution with one-hot channel selection.
//!
//! All values are natural-log probabilities. Accumulation is always in f64.

use crate::error::{Result, SpnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape { h, w, c }
    }

    pub const fn cells(&self) -> usize {
        self.h * self.w
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.c + k
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Log-probabilities laid out height, width, channel (channel fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct LogTensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl LogTensor {
    pub fn filled(shape: Shape, value: f64) -> Self {
        LogTensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(SpnError::domain(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(LogTensor { shape, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.shape.index(i, j, k)]
    }

    #[inline]
    pub fn cell(&self, cell: usize) -> &[f64] {
        let c = self.shape.c;
        &self.data[cell * c..(cell + 1) * c]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        let c = self.shape.c;
        &mut self.data[cell * c..(cell + 1) * c]
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

/// Placement of a product kernel along one axis.
///
/// Output position `o` reads input positions `origin + o * stride + t * dilation`
/// for taps `t in 0..kernel`; positions outside `0..input` are padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AxisGeometry {
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub origin: isize,
    pub output: usize,
}

impl AxisGeometry {
    /// `(k - 1) * d` padding on both sides.
    pub fn full(input: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        let span = (kernel - 1) * dilation;
        AxisGeometry {
            input,
            kernel,
            stride,
            dilation,
            origin: -(span as isize),
            output: (input + span - 1) / stride + 1,
        }
    }

    /// No padding; `None` when the dilated kernel does not fit.
    pub fn valid(input: usize, kernel: usize, stride: usize, dilation: usize) -> Option<Self> {
        let span = (kernel - 1) * dilation;
        if input < span + 1 {
            return None;
        }
        Some(AxisGeometry {
            input,
            kernel,
            stride,
            dilation,
            origin: 0,
            output: (input - span - 1) / stride + 1,
        })
    }

    /// Keep only outputs `first..first + len` of this geometry.
    pub fn cropped(&self, first: usize, len: usize) -> Self {
        debug_assert!(first + len <= self.output);
        AxisGeometry {
            origin: self.origin + (first * self.stride) as isize,
            output: len,
            ..*self
        }
    }

    #[inline]
    pub fn input_index(&self, out: usize, tap: usize) -> Option<usize> {
        let pos = self.origin + (out * self.stride + tap * self.dilation) as isize;
        (pos >= 0 && (pos as usize) < self.input).then_some(pos as usize)
    }

    /// Padding cells implied before the first input position.
    pub fn pad_before(&self) -> usize {
        (-self.origin).max(0) as usize
    }

    /// Padding cells implied after the last input position.
    pub fn pad_after(&self) -> usize {
        let last =
            self.origin + ((self.output.saturating_sub(1)) * self.stride + (self.kernel - 1) * self.dilation) as isize;
        (last - (self.input as isize - 1)).max(0) as usize
    }
}

/// One-hot channel selection: row `o` lists, for every kernel tap (row-major
/// over the patch), which input channel product `o` takes from that cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelTable {
    pub outputs: usize,
    pub taps: usize,
    pub entries: Vec<u32>,
}

impl KernelTable {
    /// First `outputs` channel tuples in lexicographic order (tap 0 most
    /// significant). With `outputs == channels^taps` this is every combination.
    pub fn lexicographic(channels: usize, taps: usize, outputs: usize) -> Self {
        let mut entries = vec![0u32; outputs * taps];
        for o in 0..outputs {
            let mut rem = o;
            for t in (0..taps).rev() {
                entries[o * taps + t] = (rem % channels) as u32;
                rem /= channels;
            }
        }
        KernelTable { outputs, taps, entries }
    }

    pub fn depthwise(channels: usize, taps: usize) -> Self {
        let entries = (0..channels)
            .flat_map(|c| std::iter::repeat_n(c as u32, taps))
            .collect();
        KernelTable {
            outputs: channels,
            taps,
            entries,
        }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[u32] {
        &self.entries[o * self.taps..(o + 1) * self.taps]
    }

    pub fn is_depthwise(&self) -> bool {
        (0..self.outputs).all(|o| self.row(o).iter().all(|&c| c as usize == o))
    }
}

/// Sum weights shared by every cell of a layer, row-major `[out][in]`.
#[derive(Debug, Clone, Copy)]
pub struct SumKernel<'a> {
    pub inputs: usize,
    pub outputs: usize,
    pub log_w: &'a [f64],
    pub w: &'a [f64],
}

impl SumKernel<'_> {
    #[inline]
    pub fn log_row(&self, o: usize) -> &[f64] {
        &self.log_w[o * self.inputs..(o + 1) * self.inputs]
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.w[o * self.inputs..(o + 1) * self.inputs]
    }

    /// View of `outputs` consecutive rows starting at `first`.
    pub fn block(&self, first: usize, outputs: usize) -> SumKernel<'_> {
        let r = first * self.inputs..(first + outputs) * self.inputs;
        SumKernel {
            inputs: self.inputs,
            outputs,
            log_w: &self.log_w[r.clone()],
            w: &self.w[r],
        }
    }
}

// Below this the scaled linear-space sum may have lost terms to underflow and
// the exact max-shift path is used instead.
pub(crate) const FAST_PATH_FLOOR: f64 = 1e-200;

/// `log sum_i exp(log_w[i] + children[i])` with max-shift stabilization.
/// Terms whose weight and child are both zero contribute nothing.
pub fn weighted_logsumexp(children: &[f64], log_weights: &[f64]) -> Result<f64> {
    if children.is_empty() {
        return Err(SpnError::domain("weighted log-sum-exp over an empty child set"));
    }
    if children.len() != log_weights.len() {
        return Err(SpnError::domain(format!(
            "{} children but {} weights",
            children.len(),
            log_weights.len()
        )));
    }
    Ok(lse_exact(children, log_weights))
}

#[inline]
pub(crate) fn lse_exact(children: &[f64], log_weights: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (&c, &lw) in children.iter().zip(log_weights) {
        let t = c + lw;
        if t > m {
            m = t;
        }
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut s = 0.0;
    for (&c, &lw) in children.iter().zip(log_weights) {
        let t = c + lw;
        if t > f64::NEG_INFINITY {
            s += (t - m).exp();
        }
    }
    m + s.ln()
}

/// Plain log-sum-exp.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values
        .iter()
        .filter(|v| **v > f64::NEG_INFINITY)
        .map(|v| (v - m).exp())
        .sum::<f64>()
        .ln()
}

#[inline]
pub(crate) fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Scales one cell's children by their maximum into `scaled`; returns the max.
#[inline]
pub(crate) fn scale_cell(x: &[f64], scaled: &mut [f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        scaled.iter_mut().for_each(|e| *e = 0.0);
    } else {
        for (e, &v) in scaled.iter_mut().zip(x) {
            *e = (v - m).exp();
        }
    }
    m
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All sums of one cell: `out[o] = log sum_i w[o][i] exp(x[i])`.
#[inline]
pub(crate) fn sum_cell(x: &[f64], kernel: &SumKernel<'_>, out: &mut [f64], scaled: &mut [f64]) {
    let m = scale_cell(x, scaled);
    if m == f64::NEG_INFINITY {
        out.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        return;
    }
    for (o, slot) in out.iter_mut().enumerate() {
        let s = dot(kernel.row(o), scaled);
        *slot = if s >= FAST_PATH_FLOOR {
            m + s.ln()
        } else {
            lse_exact(x, kernel.log_row(o))
        };
    }
}

/// Max-product variant of [`sum_cell`]; records the winning child per sum
/// (lowest index on ties).
#[inline]
pub(crate) fn max_cell(x: &[f64], kernel: &SumKernel<'_>, out: &mut [f64], winners: &mut [u32]) {
    for o in 0..kernel.outputs {
        let (best, arg) = weighted_argmax(x, kernel.log_row(o));
        out[o] = best;
        winners[o] = arg as u32;
    }
}

/// `(max_i log_w[i] + x[i], argmax)`, ties to the lowest index.
#[inline]
pub fn weighted_argmax(x: &[f64], log_w: &[f64]) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, (&v, &lw)) in x.iter().zip(log_w).enumerate() {
        let t = v + lw;
        if t > best {
            best = t;
            arg = i;
        }
    }
    (best, arg)
}

/// `argmax_i x[i]`, ties to the lowest index.
#[inline]
pub fn argmax(x: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// Spatial sum layer: every non-padding cell mixes its own channels with the
/// shared weight matrix. Padding cells keep the value 0.0.
pub fn spatial_sum_forward(input: &LogTensor, kernel: &SumKernel<'_>, padding: &[bool]) -> Result<LogTensor> {
    if input.shape.c != kernel.inputs {
        return Err(SpnError::domain(format!(
            "spatial sum expects {} input channels, tensor has {}",
            kernel.inputs, input.shape.c
        )));
    }
    if padding.len() != input.shape.cells() {
        return Err(SpnError::domain("padding mask does not match the input grid"));
    }
    let shape = Shape::new(input.shape.h, input.shape.w, kernel.outputs);
    let mut out = LogTensor::zeros(shape);
    spatial_sum_into(input, kernel, false, padding, &mut out);
    Ok(out)
}

/// With `local`, cell `i` uses kernel rows `i * C_out..(i + 1) * C_out`.
pub(crate) fn spatial_sum_into(
    input: &LogTensor,
    kernel: &SumKernel<'_>,
    local: bool,
    padding: &[bool],
    out: &mut LogTensor,
) {
    let co = out.shape.c;
    let mut scaled = vec![0.0; kernel.inputs];
    for cell in 0..input.shape.cells() {
        if padding[cell] {
            out.cell_mut(cell).iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let x = input.cell(cell);
        let k = kernel.block(if local { cell * co } else { 0 }, co);
        sum_cell(x, &k, out.cell_mut(cell), &mut scaled);
    }
}

/// Log-space product convolution. Each output node adds the selected channel
/// of every in-bounds patch cell; out-of-bounds (padding) taps add 0.0.
pub fn gclp_forward(
    input: &LogTensor,
    rows: &AxisGeometry,
    cols: &AxisGeometry,
    table: &KernelTable,
) -> Result<LogTensor> {
    if rows.input != input.shape.h || cols.input != input.shape.w {
        return Err(SpnError::domain(format!(
            "product geometry expects a {}x{} grid, input is {}x{}",
            rows.input, cols.input, input.shape.h, input.shape.w
        )));
    }
    if table.taps != rows.kernel * cols.kernel {
        return Err(SpnError::domain(
            "kernel table tap count does not match the kernel size",
        ));
    }
    if table.entries.iter().any(|&c| c as usize >= input.shape.c) {
        return Err(SpnError::domain(
            "kernel table selects a channel the input does not have",
        ));
    }
    let mut out = LogTensor::zeros(Shape::new(rows.output, cols.output, table.outputs));
    gclp_into(input, rows, cols, table, &mut out);
    Ok(out)
}

/// Input cell index of every tap of output cell `(oi, oj)`, `None` for padding.
#[inline]
pub(crate) fn patch_cells(
    rows: &AxisGeometry,
    cols: &AxisGeometry,
    in_w: usize,
    oi: usize,
    oj: usize,
    cells: &mut [Option<usize>],
) {
    let mut t = 0;
    for ki in 0..rows.kernel {
        let r = rows.input_index(oi, ki);
        for kj in 0..cols.kernel {
            let c = cols.input_index(oj, kj);
            cells[t] = match (r, c) {
                (Some(r), Some(c)) => Some(r * in_w + c),
                _ => None,
            };
            t += 1;
        }
    }
}

pub(crate) fn gclp_into(
    input: &LogTensor,
    rows: &AxisGeometry,
    cols: &AxisGeometry,
    table: &KernelTable,
    out: &mut LogTensor,
) {
    let c_in = input.shape.c;
    let mut cells = vec![None; table.taps];
    let mut base: Vec<Option<usize>> = vec![None; table.taps];
    for oi in 0..rows.output {
        for oj in 0..cols.output {
            patch_cells(rows, cols, input.shape.w, oi, oj, &mut cells);
            for (b, c) in base.iter_mut().zip(&cells) {
                *b = c.map(|c| c * c_in);
            }
            let dst = out.cell_mut(oi * cols.output + oj);
            for (o, slot) in dst.iter_mut().enumerate() {
                let sel = table.row(o);
                let mut acc = 0.0;
                for (b, &ch) in base.iter().zip(sel) {
                    if let Some(b) = b {
                        acc += input.data[b + ch as usize];
                    }
                }
                *slot = acc;
            }
        }
    }
}
