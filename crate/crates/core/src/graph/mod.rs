//! Network structure: the declarative layer stack, symbolic scope
//! propagation, completeness/decomposability checks and compilation into an
//! execution plan.

mod plan;
mod scope;
mod spec;
mod validity;

pub use plan::{compile, ExecutionPlan, FlatRole, FlatSumOp, LeafKind, Op, ProductOp, SpatialSumOp, SumSlot};
pub use scope::Scope;
pub use spec::{parse_structure, ChannelSelection, GclpSpec, LayerSpec, NetworkSpec, Padding, Pair};
pub use validity::{check_validity, propagate_scopes, LayerScopes, ScopeMap, ValidityReport, Violation, ViolationKind};
