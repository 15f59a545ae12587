use std::fmt;

use super::scope::Scope;
use super::spec::{ChannelSelection, GclpSpec, LayerSpec, NetworkSpec, Padding};
use crate::error::{Result, SpnError};
use crate::tensor::{AxisGeometry, Shape};

// Enumerated one-hot layers with more combinations than this must name an
// explicit channel count.
const MAX_ENUMERATED_CHANNELS: usize = 1 << 16;

/// Scopes of one layer, one per cell. A cell with an empty scope depends on
/// no variable (it is padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerScopes {
    pub height: usize,
    pub width: usize,
    pub scopes: Vec<Scope>,
}

impl LayerScopes {
    pub fn scope(&self, i: usize, j: usize) -> &Scope {
        &self.scopes[i * self.width + j]
    }

    pub fn is_padding(&self, cell: usize) -> bool {
        self.scopes[cell].is_empty()
    }

    pub fn padding_mask(&self) -> Vec<bool> {
        self.scopes.iter().map(Scope::is_empty).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeMap {
    pub layers: Vec<LayerScopes>,
}

/// Per-layer facts derived from the structure: output shapes, resolved
/// product geometry and the cells feeding each flat sum.
#[derive(Debug, Clone)]
pub(crate) struct Analysis {
    pub shapes: Vec<Shape>,
    pub geometry: Vec<Option<(AxisGeometry, AxisGeometry)>>,
    pub flat_children: Vec<Option<Vec<usize>>>,
    pub scopes: ScopeMap,
}

/// Symbolic scope propagation from the leaves to the root.
pub fn propagate_scopes(spec: &NetworkSpec) -> Result<ScopeMap> {
    Ok(analyze(spec)?.scopes)
}

pub(crate) fn analyze(spec: &NetworkSpec) -> Result<Analysis> {
    spec.check_well_formed()?;
    let nvars = spec.num_vars();
    let n = spec.layers.len();
    let mut shapes: Vec<Shape> = Vec::with_capacity(n);
    let mut geometry = Vec::with_capacity(n);
    let mut flat_children = Vec::with_capacity(n);
    let mut layers: Vec<LayerScopes> = Vec::with_capacity(n);

    for (idx, layer) in spec.layers.iter().enumerate() {
        let prev_shape = shapes.last().copied();
        let (shape, geom, children, scopes) = match *layer {
            LayerSpec::GaussianLeaf { components: c } | LayerSpec::IndicatorLeaf { arity: c } => {
                let scopes = (0..nvars).map(|v| Scope::singleton(nvars, v)).collect();
                let ls = LayerScopes {
                    height: spec.height,
                    width: spec.width,
                    scopes,
                };
                (Shape::new(spec.height, spec.width, c), None, None, ls)
            }
            LayerSpec::SpatialSum { channels, .. } => {
                let prev = prev_shape.expect("leaf layer comes first");
                let input = layers.last().expect("leaf layer comes first");
                (Shape::new(prev.h, prev.w, channels), None, None, input.clone())
            }
            LayerSpec::Gclp(g) => {
                let prev = prev_shape.expect("leaf layer comes first");
                let input = layers.last().expect("leaf layer comes first");
                let (rows, cols, scopes) = product_layer(idx, &g, prev, input, nvars)?;
                let c_out = product_channels(idx, &g, prev.c)?;
                (
                    Shape::new(rows.output, cols.output, c_out),
                    Some((rows, cols)),
                    None,
                    scopes,
                )
            }
            LayerSpec::ClassSums { classes } => {
                let input = layers.last().expect("leaf layer comes first");
                let (children, scopes) = flat_sum_layer(idx, input, nvars)?;
                (Shape::new(1, 1, classes), None, Some(children), scopes)
            }
            LayerSpec::RootSum => {
                let input = layers.last().expect("leaf layer comes first");
                let (children, scopes) = flat_sum_layer(idx, input, nvars)?;
                (Shape::new(1, 1, 1), None, Some(children), scopes)
            }
        };
        shapes.push(shape);
        geometry.push(geom);
        flat_children.push(children);
        layers.push(scopes);
    }
    Ok(Analysis {
        shapes,
        geometry,
        flat_children,
        scopes: ScopeMap { layers },
    })
}

fn product_channels(idx: usize, g: &GclpSpec, c_in: usize) -> Result<usize> {
    let taps = g.taps() as u32;
    let combos = c_in.checked_pow(taps);
    match g.selection {
        ChannelSelection::Depthwise => Ok(c_in),
        ChannelSelection::OneHot(None) => match combos {
            Some(n) if n <= MAX_ENUMERATED_CHANNELS => Ok(n),
            _ => Err(SpnError::structure(
                idx,
                format!("{c_in}^{taps} channel combinations; give an explicit count with onehot:<n>"),
            )),
        },
        ChannelSelection::OneHot(Some(n)) => {
            if combos.is_some_and(|c| n > c) {
                Err(SpnError::structure(
                    idx,
                    format!("onehot:{n} exceeds the {} available combinations", combos.unwrap_or(0)),
                ))
            } else {
                Ok(n)
            }
        }
    }
}

fn patch_scope(
    rows: &AxisGeometry,
    cols: &AxisGeometry,
    input: &LayerScopes,
    oi: usize,
    oj: usize,
    nvars: usize,
) -> Scope {
    let mut s = Scope::empty(nvars);
    for ki in 0..rows.kernel {
        let Some(r) = rows.input_index(oi, ki) else { continue };
        for kj in 0..cols.kernel {
            if let Some(c) = cols.input_index(oj, kj) {
                s.union_with(input.scope(r, c));
            }
        }
    }
    s
}

fn product_layer(
    idx: usize,
    g: &GclpSpec,
    prev: Shape,
    input: &LayerScopes,
    nvars: usize,
) -> Result<(AxisGeometry, AxisGeometry, LayerScopes)> {
    let (mut rows, mut cols) = match g.padding {
        Padding::Full | Padding::Final => (
            AxisGeometry::full(prev.h, g.kernel.h, g.stride.h, g.dilation.h),
            AxisGeometry::full(prev.w, g.kernel.w, g.stride.w, g.dilation.w),
        ),
        Padding::None => {
            let rows = AxisGeometry::valid(prev.h, g.kernel.h, g.stride.h, g.dilation.h);
            let cols = AxisGeometry::valid(prev.w, g.kernel.w, g.stride.w, g.dilation.w);
            match (rows, cols) {
                (Some(r), Some(c)) => (r, c),
                _ => {
                    return Err(SpnError::structure(
                        idx,
                        format!(
                            "kernel {} with dilation {} does not fit the {}x{} input without padding",
                            g.kernel, g.dilation, prev.h, prev.w
                        ),
                    ))
                }
            }
        }
    };
    let mut scopes: Vec<Scope> = Vec::with_capacity(rows.output * cols.output);
    for oi in 0..rows.output {
        for oj in 0..cols.output {
            scopes.push(patch_scope(&rows, &cols, input, oi, oj, nvars));
        }
    }
    if g.padding == Padding::Final {
        let full: Vec<(usize, usize)> = (0..rows.output)
            .flat_map(|i| (0..cols.output).map(move |j| (i, j)))
            .filter(|&(i, j)| scopes[i * cols.output + j].is_full())
            .collect();
        if full.is_empty() {
            return Err(SpnError::structure(
                idx,
                "final padding: no output cell covers every variable",
            ));
        }
        let (i0, i1) = (
            full.iter().map(|p| p.0).min().unwrap(),
            full.iter().map(|p| p.0).max().unwrap(),
        );
        let (j0, j1) = (
            full.iter().map(|p| p.1).min().unwrap(),
            full.iter().map(|p| p.1).max().unwrap(),
        );
        if full.len() != (i1 - i0 + 1) * (j1 - j0 + 1) {
            return Err(SpnError::structure(
                idx,
                "final padding: full-scope cells do not form a rectangle",
            ));
        }
        let width = cols.output;
        let cropped: Vec<Scope> = (i0..=i1)
            .flat_map(|i| (j0..=j1).map(move |j| i * width + j))
            .map(|cell| scopes[cell].clone())
            .collect();
        rows = rows.cropped(i0, i1 - i0 + 1);
        cols = cols.cropped(j0, j1 - j0 + 1);
        scopes = cropped;
    }
    let ls = LayerScopes {
        height: rows.output,
        width: cols.output,
        scopes,
    };
    Ok((rows, cols, ls))
}

fn flat_sum_layer(idx: usize, input: &LayerScopes, nvars: usize) -> Result<(Vec<usize>, LayerScopes)> {
    let children: Vec<usize> = (0..input.scopes.len()).filter(|&c| !input.is_padding(c)).collect();
    if children.is_empty() {
        return Err(SpnError::structure(idx, "sum has no non-padding input cells"));
    }
    let mut scope = Scope::empty(nvars);
    for &c in &children {
        scope.union_with(&input.scopes[c]);
    }
    let ls = LayerScopes {
        height: 1,
        width: 1,
        scopes: vec![scope],
    };
    Ok((children, ls))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Completeness,
    Decomposability,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Completeness => "completeness",
            ViolationKind::Decomposability => "decomposability",
        })
    }
}

/// One broken condition. For product layers `cell` is the output cell whose
/// patch overlaps; for sums it is the input cell whose scope differs from the
/// first child cell of that sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: usize,
    pub cell: (usize, usize),
    pub kind: ViolationKind,
    pub scopes: Vec<Scope>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        ValidityReport {
            valid: violations.is_empty(),
            violations,
        }
    }
}

impl fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return writeln!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "layer={} cell={},{} kind={}", v.layer, v.cell.0, v.cell.1, v.kind)?;
        }
        Ok(())
    }
}

/// Completeness at every sum, decomposability at every product; lists every
/// violation found.
pub fn check_validity(spec: &NetworkSpec) -> Result<ValidityReport> {
    let analysis = analyze(spec)?;
    Ok(validity_of(spec, &analysis))
}

pub(crate) fn validity_of(spec: &NetworkSpec, analysis: &Analysis) -> ValidityReport {
    let layers = &analysis.scopes.layers;
    let mut violations = Vec::new();
    for (idx, layer) in spec.layers.iter().enumerate().skip(1) {
        let input = &layers[idx - 1];
        match layer {
            LayerSpec::SpatialSum { .. } => {
                // Each sum reads the channels of one input cell; they all carry
                // that cell's scope.
                for cell in 0..input.scopes.len() {
                    if input.is_padding(cell) {
                        continue;
                    }
                    let first = &input.scopes[cell];
                    let channels = analysis.shapes[idx - 1].c;
                    let child_scopes = std::iter::repeat_n(&input.scopes[cell], channels);
                    if let Some(bad) = child_scopes.into_iter().find(|s| *s != first) {
                        violations.push(Violation {
                            layer: idx,
                            cell: (cell / input.width, cell % input.width),
                            kind: ViolationKind::Completeness,
                            scopes: vec![first.clone(), bad.clone()],
                        });
                    }
                }
            }
            LayerSpec::Gclp(_) => {
                let (rows, cols) = analysis.geometry[idx].expect("product geometry");
                for oi in 0..rows.output {
                    for oj in 0..cols.output {
                        let mut taps: Vec<&Scope> = Vec::with_capacity(rows.kernel * cols.kernel);
                        for ki in 0..rows.kernel {
                            let Some(r) = rows.input_index(oi, ki) else { continue };
                            for kj in 0..cols.kernel {
                                if let Some(c) = cols.input_index(oj, kj) {
                                    let s = input.scope(r, c);
                                    if !s.is_empty() {
                                        taps.push(s);
                                    }
                                }
                            }
                        }
                        let overlapping =
                            (0..taps.len()).any(|a| (a + 1..taps.len()).any(|b| !taps[a].is_disjoint(taps[b])));
                        if overlapping {
                            violations.push(Violation {
                                layer: idx,
                                cell: (oi, oj),
                                kind: ViolationKind::Decomposability,
                                scopes: taps.into_iter().cloned().collect(),
                            });
                        }
                    }
                }
            }
            LayerSpec::ClassSums { .. } | LayerSpec::RootSum => {
                let children = analysis.flat_children[idx].as_ref().expect("flat sum children");
                let first = &input.scopes[children[0]];
                for &cell in &children[1..] {
                    let s = &input.scopes[cell];
                    if s != first {
                        violations.push(Violation {
                            layer: idx,
                            cell: (cell / input.width, cell % input.width),
                            kind: ViolationKind::Completeness,
                            scopes: vec![first.clone(), s.clone()],
                        });
                    }
                }
            }
            LayerSpec::GaussianLeaf { .. } | LayerSpec::IndicatorLeaf { .. } => {}
        }
    }
    ValidityReport::from_violations(violations)
}
