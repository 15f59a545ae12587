//! Test oracles: an explicit node-by-node circuit built from a structure and
//! its weights, evaluated in linear space, and a generator of random valid
//! discrete networks.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dgcspn::graph::{ChannelSelection, GclpSpec, LayerSpec, NetworkSpec, Padding};
use dgcspn::params::{AccumulatorSpace, LeafParams, ModelParams, SumWeights};
use dgcspn::{compile, ExecutionPlan};

#[derive(Debug, Clone)]
pub enum Node {
    Indicator {
        var: usize,
        value: usize,
    },
    Sum {
        children: Vec<usize>,
        weights: Vec<f64>,
        slot: usize,
        output: usize,
    },
    Product {
        children: Vec<usize>,
    },
}

/// A circuit in topological order; the last node is the root.
#[derive(Debug, Clone)]
pub struct Circuit {
    pub nodes: Vec<Node>,
    pub num_vars: usize,
    pub class_nodes: Vec<usize>,
}

/// One grid of the oracle: per cell, its scope and channel node ids (empty
/// scope = padding, no nodes).
struct Grid {
    h: usize,
    w: usize,
    scopes: Vec<BTreeSet<usize>>,
    nodes: Vec<Vec<usize>>,
}

/// Output positions of one axis as lists of input indices per tap
/// (`None` outside the input).
pub fn axis_windows(input: usize, k: usize, s: usize, d: usize, padding: Padding) -> Vec<Vec<Option<usize>>> {
    let span = (k - 1) * d;
    let (origin, count): (isize, usize) = match padding {
        Padding::None => (0, (input - span - 1) / s + 1),
        Padding::Full | Padding::Final => (-(span as isize), (input + 2 * span - span - 1) / s + 1),
    };
    (0..count)
        .map(|o| {
            (0..k)
                .map(|t| {
                    let p = origin + (o * s + t * d) as isize;
                    (p >= 0 && (p as usize) < input).then_some(p as usize)
                })
                .collect()
        })
        .collect()
}

/// Channel of tap `t` for output channel `o`: base-`c` digits of `o`, tap 0
/// most significant.
fn onehot_digit(o: usize, t: usize, taps: usize, c: usize) -> usize {
    (o / c.pow((taps - 1 - t) as u32)) % c
}

pub fn build_circuit(spec: &NetworkSpec, params: &ModelParams) -> Circuit {
    let nvars = spec.height * spec.width;
    let mut nodes = Vec::new();
    let mut grid: Option<Grid> = None;
    let mut slot = 0;
    let mut class_nodes = Vec::new();
    for layer in &spec.layers {
        match layer {
            LayerSpec::IndicatorLeaf { arity } => {
                let mut g = Grid {
                    h: spec.height,
                    w: spec.width,
                    scopes: Vec::new(),
                    nodes: Vec::new(),
                };
                for v in 0..nvars {
                    g.scopes.push(BTreeSet::from([v]));
                    let ids = (0..*arity)
                        .map(|value| {
                            nodes.push(Node::Indicator { var: v, value });
                            nodes.len() - 1
                        })
                        .collect();
                    g.nodes.push(ids);
                }
                grid = Some(g);
            }
            LayerSpec::GaussianLeaf { .. } => panic!("oracle handles indicator leaves only"),
            LayerSpec::SpatialSum { channels, local } => {
                let g = grid.as_mut().unwrap();
                let sw = &params.sums[slot];
                slot += 1;
                for cell in 0..g.h * g.w {
                    if g.scopes[cell].is_empty() {
                        continue;
                    }
                    let children = g.nodes[cell].clone();
                    let base = if *local { cell * channels } else { 0 };
                    g.nodes[cell] = (0..*channels)
                        .map(|o| {
                            nodes.push(Node::Sum {
                                children: children.clone(),
                                weights: sw.row(base + o).to_vec(),
                                slot: slot - 1,
                                output: base + o,
                            });
                            nodes.len() - 1
                        })
                        .collect();
                }
            }
            LayerSpec::Gclp(GclpSpec {
                kernel,
                stride,
                dilation,
                padding,
                selection,
            }) => {
                let g = grid.take().unwrap();
                let c_in = g.nodes.iter().find(|n| !n.is_empty()).map_or(0, Vec::len);
                let rows = axis_windows(g.h, kernel.h, stride.h, dilation.h, *padding);
                let cols = axis_windows(g.w, kernel.w, stride.w, dilation.w, *padding);
                let taps = kernel.h * kernel.w;
                let c_out = match selection {
                    ChannelSelection::Depthwise => c_in,
                    ChannelSelection::OneHot(None) => c_in.pow(taps as u32),
                    ChannelSelection::OneHot(Some(n)) => *n,
                };
                let mut out = Grid {
                    h: rows.len(),
                    w: cols.len(),
                    scopes: Vec::new(),
                    nodes: Vec::new(),
                };
                for r in &rows {
                    for c in &cols {
                        let mut patch = Vec::new();
                        for ri in r {
                            for ci in c {
                                patch.push(match (ri, ci) {
                                    (Some(a), Some(b)) => {
                                        let cell = a * g.w + b;
                                        (!g.scopes[cell].is_empty()).then_some(cell)
                                    }
                                    _ => None,
                                });
                            }
                        }
                        let scope: BTreeSet<usize> = patch
                            .iter()
                            .flatten()
                            .flat_map(|&cell| g.scopes[cell].iter().copied())
                            .collect();
                        let ids = if scope.is_empty() {
                            Vec::new()
                        } else {
                            (0..c_out)
                                .map(|o| {
                                    let children = patch
                                        .iter()
                                        .enumerate()
                                        .filter_map(|(t, cell)| {
                                            let ch = match selection {
                                                ChannelSelection::Depthwise => o,
                                                ChannelSelection::OneHot(_) => onehot_digit(o, t, taps, c_in),
                                            };
                                            cell.map(|cell| g.nodes[cell][ch])
                                        })
                                        .collect();
                                    nodes.push(Node::Product { children });
                                    nodes.len() - 1
                                })
                                .collect()
                        };
                        out.scopes.push(scope);
                        out.nodes.push(ids);
                    }
                }
                if *padding == Padding::Final {
                    let full: Vec<usize> = (0..out.h * out.w).filter(|&c| out.scopes[c].len() == nvars).collect();
                    assert!(!full.is_empty(), "final layer without full-scope cells");
                    let (i0, i1) = (
                        full.iter().map(|c| c / out.w).min().unwrap(),
                        full.iter().map(|c| c / out.w).max().unwrap(),
                    );
                    let (j0, j1) = (
                        full.iter().map(|c| c % out.w).min().unwrap(),
                        full.iter().map(|c| c % out.w).max().unwrap(),
                    );
                    let mut cropped = Grid {
                        h: i1 - i0 + 1,
                        w: j1 - j0 + 1,
                        scopes: Vec::new(),
                        nodes: Vec::new(),
                    };
                    for i in i0..=i1 {
                        for j in j0..=j1 {
                            cropped.scopes.push(out.scopes[i * out.w + j].clone());
                            cropped.nodes.push(out.nodes[i * out.w + j].clone());
                        }
                    }
                    out = cropped;
                }
                grid = Some(out);
            }
            LayerSpec::ClassSums { classes } => {
                let g = grid.take().unwrap();
                let children: Vec<usize> = g.nodes.iter().flatten().copied().collect();
                let sw = &params.sums[slot];
                slot += 1;
                let ids: Vec<usize> = (0..*classes)
                    .map(|o| {
                        nodes.push(Node::Sum {
                            children: children.clone(),
                            weights: sw.row(o).to_vec(),
                            slot: slot - 1,
                            output: o,
                        });
                        nodes.len() - 1
                    })
                    .collect();
                class_nodes = ids.clone();
                grid = Some(Grid {
                    h: 1,
                    w: 1,
                    scopes: vec![(0..nvars).collect()],
                    nodes: vec![ids],
                });
            }
            LayerSpec::RootSum => {
                let g = grid.take().unwrap();
                let children: Vec<usize> = g.nodes.iter().flatten().copied().collect();
                nodes.push(Node::Sum {
                    children,
                    weights: params.sums[slot].row(0).to_vec(),
                    slot,
                    output: 0,
                });
            }
        }
    }
    Circuit {
        nodes,
        num_vars: nvars,
        class_nodes,
    }
}

impl Circuit {
    /// Linear value of every node under `evidence` (`None` = hidden).
    pub fn values(&self, evidence: &[Option<usize>]) -> Vec<f64> {
        self.values_with(|var, value| match evidence[var] {
            Some(e) if e != value => 0.0,
            _ => 1.0,
        })
    }

    /// Linear value of every node with indicator `(var, value)` replaced by
    /// `leaf(var, value)`.
    pub fn values_with(&self, leaf: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let x = match n {
                Node::Indicator { var, value } => leaf(*var, *value),
                Node::Sum { children, weights, .. } => children.iter().zip(weights).map(|(&c, w)| w * v[c]).sum(),
                Node::Product { children } => children.iter().map(|&c| v[c]).product(),
            };
            v.push(x);
        }
        v
    }

    pub fn root(&self, evidence: &[Option<usize>]) -> f64 {
        *self.values(evidence).last().unwrap()
    }

    /// Root value of every complete binary assignment, indexed by the
    /// assignment's bits (variable `v` = bit `v`).
    pub fn joint_table(&self) -> Vec<f64> {
        (0..1usize << self.num_vars)
            .map(|bits| {
                let ev: Vec<Option<usize>> = (0..self.num_vars).map(|v| Some((bits >> v) & 1)).collect();
                self.root(&ev)
            })
            .collect()
    }
}

impl Circuit {
    /// Hard-EM winner counts per sum slot for one sample: every sum reached
    /// from the root picks its child maximizing `w * value` (or `value`
    /// alone with `unweighted`) and adds 1 for that child. `None` when some
    /// reached sum has two candidates within a relative 1e-9 of each other.
    pub fn hard_counts(&self, values: &[f64], slots: &[(usize, usize)], unweighted: bool) -> Option<Vec<Vec<f64>>> {
        let mut counts: Vec<Vec<f64>> = slots.iter().map(|&(i, o)| vec![0.0; i * o]).collect();
        let mut reached = vec![false; self.nodes.len()];
        *reached.last_mut().unwrap() = true;
        for id in (0..self.nodes.len()).rev() {
            if !reached[id] {
                continue;
            }
            match &self.nodes[id] {
                Node::Indicator { .. } => {}
                Node::Product { children } => children.iter().for_each(|&c| reached[c] = true),
                Node::Sum {
                    children,
                    weights,
                    slot,
                    output,
                } => {
                    let score = |i: usize| {
                        if unweighted {
                            values[children[i]]
                        } else {
                            weights[i] * values[children[i]]
                        }
                    };
                    let mut order: Vec<usize> = (0..children.len()).collect();
                    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
                    if order.len() > 1 && score(order[1]) >= score(order[0]) * (1.0 - 1e-9) {
                        return None;
                    }
                    let win = order[0];
                    counts[*slot][output * children.len() + win] += 1.0;
                    reached[children[win]] = true;
                }
            }
        }
        Some(counts)
    }
}

/// Sum of the joint table over the assignments consistent with `evidence`.
pub fn enumerate_marginal(table: &[f64], evidence: &[Option<usize>]) -> f64 {
    table
        .iter()
        .enumerate()
        .filter(|(bits, _)| {
            evidence
                .iter()
                .enumerate()
                .all(|(v, e)| e.is_none_or(|x| (bits >> v) & 1 == x))
        })
        .map(|(_, p)| p)
        .sum()
}

fn random_selection(rng: &mut ChaCha8Rng, c_in: usize, taps: usize) -> ChannelSelection {
    let all = c_in.checked_pow(taps as u32).unwrap_or(usize::MAX);
    match rng.random_range(0..3) {
        0 => ChannelSelection::Depthwise,
        1 if all <= 16 => ChannelSelection::OneHot(None),
        _ => ChannelSelection::OneHot(Some(rng.random_range(1..=all.min(6)))),
    }
}

/// Random structure over binary indicators on a grid of at most 12 cells:
/// optional stride-2 unpadded products, then doubling-dilation products with
/// a final crop, sums of random width in between, optional class sums.
pub fn random_discrete_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let (h, w) = loop {
        let h = rng.random_range(1..=3);
        let w = rng.random_range(1..=6);
        if h * w >= 2 && h * w <= 12 {
            break (h, w);
        }
    };
    let k = |n: usize| if n > 1 { 2 } else { 1 };
    let mut layers = vec![LayerSpec::IndicatorLeaf { arity: 2 }];
    let mut c = 2usize;
    let (mut gh, mut gw) = (h, w);
    if gh.max(gw) >= 4 && rng.random_bool(0.4) {
        let sel = random_selection(rng, c, k(gh) * k(gw));
        layers.push(LayerSpec::Gclp(GclpSpec {
            kernel: dgcspn::graph::Pair::new(k(gh), k(gw)),
            stride: dgcspn::graph::Pair::new(if gh > 1 { 2 } else { 1 }, if gw > 1 { 2 } else { 1 }),
            dilation: dgcspn::graph::Pair::square(1),
            padding: Padding::None,
            selection: sel,
        }));
        gh = if gh > 1 { (gh - 2) / 2 + 1 } else { 1 };
        gw = if gw > 1 { (gw - 2) / 2 + 1 } else { 1 };
        c = rng.random_range(1..=3);
        layers.push(LayerSpec::SpatialSum {
            channels: c,
            local: rng.random_bool(0.3),
        });
    }
    let extent = gh.max(gw);
    let mut d = 1;
    if extent == 1 {
        layers.pop_if(|l| matches!(l, LayerSpec::SpatialSum { .. }));
    }
    while extent > 1 {
        let last = 2 * d >= extent;
        let taps = k(gh) * k(gw);
        let sel = random_selection(rng, c, taps);
        layers.push(LayerSpec::Gclp(GclpSpec {
            kernel: dgcspn::graph::Pair::new(k(gh), k(gw)),
            stride: dgcspn::graph::Pair::square(1),
            dilation: dgcspn::graph::Pair::square(d),
            padding: if last { Padding::Final } else { Padding::Full },
            selection: sel,
        }));
        c = match sel {
            ChannelSelection::Depthwise => c,
            ChannelSelection::OneHot(None) => c.pow(taps as u32),
            ChannelSelection::OneHot(Some(n)) => n,
        };
        if last {
            break;
        }
        if rng.random_bool(0.8) {
            c = rng.random_range(1..=3);
            layers.push(LayerSpec::SpatialSum {
                channels: c,
                local: rng.random_bool(0.3),
            });
        }
        d *= 2;
    }
    if rng.random_bool(0.3) {
        layers.push(LayerSpec::ClassSums {
            classes: rng.random_range(1..=3),
        });
    }
    layers.push(LayerSpec::RootSum);
    NetworkSpec {
        height: h,
        width: w,
        layers,
    }
}

/// Random positive weights in the given space for every sum slot.
pub fn random_params(plan: &ExecutionPlan, space: AccumulatorSpace, rng: &mut ChaCha8Rng) -> ModelParams {
    let leaf = match plan.leaf_kind() {
        dgcspn::graph::LeafKind::Indicator { arity } => LeafParams::Indicator { arity },
        _ => panic!("indicator networks only"),
    };
    let sums = plan
        .sum_slots
        .iter()
        .map(|s| {
            let accum = (0..s.inputs * s.outputs)
                .map(|_| match space {
                    AccumulatorSpace::Log => rng.random_range(-2.0..2.0),
                    AccumulatorSpace::Counts => rng.random_range(0.0..5.0),
                    AccumulatorSpace::Linear => rng.random_range(0.05..2.0),
                })
                .collect();
            SumWeights::new(s.inputs, s.outputs, space, accum).unwrap()
        })
        .collect();
    ModelParams { leaf, sums }
}

/// Random valid network with its compiled plan.
pub fn random_valid_network(rng: &mut ChaCha8Rng) -> (NetworkSpec, ExecutionPlan) {
    loop {
        let spec = random_discrete_spec(rng);
        if let Ok(plan) = compile(&spec) {
            return (spec, plan);
        }
    }
}

pub fn close_rel(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Property-test settings with a fixed generator seed, so every run of the
/// suite sees the same cases.
pub fn fixed_cases(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Default::default()
    }
}

/// One-row stack over `n` binary variables: one unit-stride product layer per
/// kernel size (width-wise), two-channel sums in between, then the root.
pub fn line_spec(n: usize, kernels: &[usize], dilations: &[usize], last_final: bool) -> NetworkSpec {
    let mut layers = vec![LayerSpec::IndicatorLeaf { arity: 2 }];
    for (i, (&k, &d)) in kernels.iter().zip(dilations).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::SpatialSum {
                channels: 2,
                local: false,
            });
        }
        let last = i + 1 == kernels.len();
        layers.push(LayerSpec::Gclp(GclpSpec {
            kernel: dgcspn::graph::Pair::new(1, k),
            stride: dgcspn::graph::Pair::square(1),
            dilation: dgcspn::graph::Pair::new(1, d),
            padding: if last && last_final {
                Padding::Final
            } else {
                Padding::Full
            },
            selection: ChannelSelection::Depthwise,
        }));
    }
    layers.push(LayerSpec::RootSum);
    NetworkSpec {
        height: 1,
        width: n,
        layers,
    }
}

/// Set-based decomposability of a full-padding one-row product stack.
pub fn line_decomposable(n: usize, kernels: &[usize], dilations: &[usize]) -> bool {
    let mut scopes: Vec<BTreeSet<usize>> = (0..n).map(|v| BTreeSet::from([v])).collect();
    for (&k, &d) in kernels.iter().zip(dilations) {
        let span = (k - 1) * d;
        let mut next = Vec::new();
        for o in 0..scopes.len() + span {
            let mut union = BTreeSet::new();
            for t in 0..k {
                let Some(p) = (o + t * d).checked_sub(span) else {
                    continue;
                };
                if let Some(s) = scopes.get(p) {
                    if s.iter().any(|v| union.contains(v)) {
                        return false;
                    }
                    union.extend(s.iter().copied());
                }
            }
            next.push(union);
        }
        scopes = next;
    }
    true
}

/// Whether `check_validity` reports no decomposability violation; `None`
/// when the structure is rejected outright.
pub fn reported_decomposable(spec: &NetworkSpec) -> Option<bool> {
    let report = dgcspn::check_validity(spec).ok()?;
    Some(
        report
            .violations
            .iter()
            .all(|v| v.kind != dgcspn::graph::ViolationKind::Decomposability),
    )
}

/// Every dilation sequence with `1 <= d_l <= prod_{i<l} k_i`.
pub fn bounded_dilations(kernels: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut bound = 1;
    for &k in kernels {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<usize>| {
                (1..=bound).map(move |d| {
                    let mut p = prefix.clone();
                    p.push(d);
                    p
                })
            })
            .collect();
        bound *= k;
    }
    out
}

pub fn product_schedule(kernels: &[usize]) -> Vec<usize> {
    kernels
        .iter()
        .scan(1, |acc, &k| {
            let d = *acc;
            *acc *= k;
            Some(d)
        })
        .collect()
}

/// Exhaustive check of the dilation schedule on one-row grids of 2..=16
/// variables, stacks of 1..=4 layers with kernels in {2, 3}. Returns the
/// number of stacks examined and a description of every disagreement.
pub fn dilation_schedule_sweep() -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut failures = Vec::new();
    for n in 2..=16usize {
        for depth in 1..=4u32 {
            for code in 0..1usize << depth {
                let kernels: Vec<usize> = (0..depth).map(|l| 2 + ((code >> l) & 1)).collect();
                let schedule = product_schedule(&kernels);
                let coverage: usize = kernels.iter().product();
                let minimal = coverage >= n && coverage / kernels[kernels.len() - 1] < n;
                for d in bounded_dilations(&kernels) {
                    checked += 1;
                    let expected = d == schedule;
                    let oracle = line_decomposable(n, &kernels, &d);
                    let reported = reported_decomposable(&line_spec(n, &kernels, &d, false));
                    if oracle != expected || reported != Some(expected) {
                        failures.push(format!(
                            "n={n} k={kernels:?} d={d:?}: expected {expected}, sets {oracle}, report {reported:?}"
                        ));
                    }
                    if minimal {
                        let valid = dgcspn::check_validity(&line_spec(n, &kernels, &d, true)).is_ok_and(|r| r.valid);
                        if valid != expected {
                            failures.push(format!("n={n} k={kernels:?} d={d:?}: full network valid={valid}"));
                        }
                    }
                }
            }
        }
    }
    (checked, failures)
}
