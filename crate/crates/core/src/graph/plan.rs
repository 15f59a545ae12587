use super::spec::{ChannelSelection, LayerSpec, NetworkSpec};
use super::validity::{analyze, validity_of};
use crate::error::{Result, SpnError};
use crate::tensor::{AxisGeometry, KernelTable, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Gaussian { components: usize },
    Indicator { arity: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlatRole {
    ClassSums,
    Root,
}

#[derive(Debug, Clone)]
pub struct SpatialSumOp {
    pub input: Shape,
    pub output: Shape,
    /// Cells with empty scope; they hold 0.0 and are never mixed.
    pub padding: Vec<bool>,
    pub slot: usize,
    pub local: bool,
}

impl SpatialSumOp {
    /// First weight row used by `cell`.
    #[inline]
    pub fn row_base(&self, cell: usize) -> usize {
        if self.local {
            cell * self.output.c
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProductOp {
    pub input: Shape,
    pub output: Shape,
    pub rows: AxisGeometry,
    pub cols: AxisGeometry,
    pub table: KernelTable,
    /// Output cells with empty scope.
    pub padding: Vec<bool>,
}

/// Sums over an explicit list of input entries (`cell * C + channel`): the
/// class sums and the root.
#[derive(Debug, Clone)]
pub struct FlatSumOp {
    pub input: Shape,
    pub children: Vec<usize>,
    pub outputs: usize,
    pub slot: usize,
    pub role: FlatRole,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf { kind: LeafKind, output: Shape },
    SpatialSum(SpatialSumOp),
    Product(ProductOp),
    FlatSum(FlatSumOp),
}

impl Op {
    pub fn output_shape(&self) -> Shape {
        match self {
            Op::Leaf { output, .. } => *output,
            Op::SpatialSum(op) => op.output,
            Op::Product(op) => op.output,
            Op::FlatSum(op) => Shape::new(1, 1, op.outputs),
        }
    }
}

/// Sum weight matrix dimensions for one parameter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SumSlot {
    pub layer: usize,
    pub inputs: usize,
    /// Weight rows; a local spatial sum has one block of C_out rows per cell.
    pub outputs: usize,
}

/// Compiled, topologically ordered program: op `i` evaluates layer `i` of the
/// spec and reads the output of op `i - 1`.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub spec: NetworkSpec,
    pub ops: Vec<Op>,
    pub sum_slots: Vec<SumSlot>,
}

impl ExecutionPlan {
    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn leaf_kind(&self) -> LeafKind {
        match self.ops[0] {
            Op::Leaf { kind, .. } => kind,
            _ => unreachable!("op 0 is the leaf layer"),
        }
    }

    pub fn leaf_shape(&self) -> Shape {
        self.ops[0].output_shape()
    }

    /// Index of the class-sum op, if the network has one.
    pub fn class_op(&self) -> Option<usize> {
        self.ops
            .iter()
            .position(|op| matches!(op, Op::FlatSum(f) if f.role == FlatRole::ClassSums))
    }

    pub fn classes(&self) -> Option<usize> {
        self.class_op().map(|i| self.ops[i].output_shape().c)
    }
}

/// Compiles a valid structure. Invalid structures are refused with the full
/// validity report.
pub fn compile(spec: &NetworkSpec) -> Result<ExecutionPlan> {
    let analysis = analyze(spec)?;
    let report = validity_of(spec, &analysis);
    if !report.valid {
        return Err(SpnError::Invalid(Box::new(report)));
    }
    let root_scope = &analysis.scopes.layers.last().expect("root layer").scopes[0];
    if !root_scope.is_full() {
        return Err(SpnError::structure(
            spec.layers.len() - 1,
            format!(
                "root scope covers {} of {} variables",
                root_scope.len(),
                spec.num_vars()
            ),
        ));
    }

    let mut ops = Vec::with_capacity(spec.layers.len());
    let mut sum_slots = Vec::new();
    for (idx, layer) in spec.layers.iter().enumerate() {
        let output = analysis.shapes[idx];
        let input = if idx > 0 { analysis.shapes[idx - 1] } else { output };
        let op = match *layer {
            LayerSpec::GaussianLeaf { components } => Op::Leaf {
                kind: LeafKind::Gaussian { components },
                output,
            },
            LayerSpec::IndicatorLeaf { arity } => Op::Leaf {
                kind: LeafKind::Indicator { arity },
                output,
            },
            LayerSpec::SpatialSum { channels, local } => {
                sum_slots.push(SumSlot {
                    layer: idx,
                    inputs: input.c,
                    outputs: if local { channels * input.cells() } else { channels },
                });
                Op::SpatialSum(SpatialSumOp {
                    input,
                    output,
                    padding: analysis.scopes.layers[idx - 1].padding_mask(),
                    slot: sum_slots.len() - 1,
                    local,
                })
            }
            LayerSpec::Gclp(g) => {
                let (rows, cols) = analysis.geometry[idx].expect("product geometry");
                let taps = g.taps();
                let table = match g.selection {
                    ChannelSelection::Depthwise => KernelTable::depthwise(input.c, taps),
                    ChannelSelection::OneHot(_) => KernelTable::lexicographic(input.c, taps, output.c),
                };
                Op::Product(ProductOp {
                    input,
                    output,
                    rows,
                    cols,
                    table,
                    padding: analysis.scopes.layers[idx].padding_mask(),
                })
            }
            LayerSpec::ClassSums { .. } | LayerSpec::RootSum => {
                let cells = analysis.flat_children[idx].as_ref().expect("flat sum children");
                let children: Vec<usize> = cells
                    .iter()
                    .flat_map(|&cell| (0..input.c).map(move |ch| cell * input.c + ch))
                    .collect();
                sum_slots.push(SumSlot {
                    layer: idx,
                    inputs: children.len(),
                    outputs: output.c,
                });
                let role = if *layer == LayerSpec::RootSum {
                    FlatRole::Root
                } else {
                    FlatRole::ClassSums
                };
                Op::FlatSum(FlatSumOp {
                    input,
                    children,
                    outputs: output.c,
                    slot: sum_slots.len() - 1,
                    role,
                })
            }
        };
        ops.push(op);
    }
    Ok(ExecutionPlan {
        spec: spec.clone(),
        ops,
        sum_slots,
    })
}
