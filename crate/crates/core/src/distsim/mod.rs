//! In-process simulation of data-parallel training with sketch-aligned
//! index synchronization and compressed-gradient all-reduce.

mod comm;
mod sim;

pub use comm::{allreduce_mean, CommLog, CommOp, CommRecord};
pub use sim::{topr_columns, DistSim, DistStepStats, ExecMode, SketchMessage};
