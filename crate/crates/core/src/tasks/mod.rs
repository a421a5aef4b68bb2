//! Synthetic benchmarks (CopyFirst, CopyLast, RocketMan) and the resumable
//! experiment grids built on them.

pub mod data;
pub mod grid;

use thiserror::Error;

use crate::engine::EngineError;
use crate::spatial::GraphError;

pub use data::{evaluate_success, gen_copy, gen_rocketman, SplitSizes, TaskData, TaskKind, SUCCESS_THRESHOLD};
pub use grid::{
    plan_cells, run_cell, run_grid, CellResult, CellSpec, CopyTopology, Experiment, ExperimentResult,
    GraphName, GridOptions, GroupSummary,
};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("no node lies exactly {k} hops from node {node}")]
    EmptyNeighbourhood { k: usize, node: usize },
    #[error("every grid cell failed; first error: {0}")]
    AllCellsFailed(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
