//! Network configuration, graph construction, shape propagation and
//! parameter accounting.

mod config;
mod describe;
mod graph;
mod shapes;

pub use config::{NetworkConfig, Variant, OCS_SWEEP};
pub use describe::describe;
pub use graph::{
    build_plnet, build_unet, count_parameters, stage_set_label, ComputeGraph, Feedback, LayerKind, Module, NodeId,
    OpId, OpSpec, ParamNode, ParamReport, ProgramOp,
};
pub use shapes::{propagate_shapes, Mismatch, ShapeMap};
