//! Deep generalized convolutional sum-product networks.
//!
//! A network is declared as a stack of layers ([`graph::NetworkSpec`]),
//! checked for completeness and decomposability by symbolic scope
//! propagation, and compiled into an [`graph::ExecutionPlan`]. Plans are
//! evaluated in log space for marginal, conditional and max-product queries,
//! trained with hard EM or Adam, and used for inpainting and classification.

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod leaves;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Result, SpnError};
pub use graph::{check_validity, compile, parse_structure, ExecutionPlan, NetworkSpec};
pub use inference::{forward_marginal, forward_mpe, partition_function};
pub use parallel::Exec;
pub use params::{AccumulatorSpace, LeafParams, ModelParams, SumWeights};
pub use tensor::{LogTensor, Shape};
