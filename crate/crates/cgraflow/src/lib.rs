//! Compiler and cycle-level simulator for a parameterized CGRA neural-network
//! engine: model parsing and lowering, dataflow tiling, tensor reordering,
//! PE-array simulation with backpressure, host post-processing, static buffer
//! planning, and an analytic performance model.

pub mod engine_sim;
pub mod graph_ir;
pub mod host_stage;
pub mod memory_planner;
pub mod models;
pub mod oracle;
pub mod perf_model;
pub mod quant;
pub mod reorder;
pub mod tiler;

use graph_ir::{Bundle, GraphError, ModelGraph};
use memory_planner::MemoryPlan;
use thiserror::Error;
use tiler::{CgraConfig, RuntimeParams, TilerError};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("bundle {bundle}: {source}")]
    Tiler { bundle: usize, source: TilerError },
}

/// A fully lowered and planned model, ready to simulate.
pub struct Program {
    pub graph: ModelGraph,
    pub bundles: Vec<Bundle>,
    pub params: Vec<RuntimeParams>,
    pub plan: MemoryPlan,
}

/// Parse, lower, tile, and plan a model document for one configuration.
pub fn compile(document: &str, config: &CgraConfig) -> Result<Program, CompileError> {
    let graph = graph_ir::parse_model(document)?;
    let mut bundles = graph_ir::lower_to_bundles(&graph)?;
    let mut params = Vec::with_capacity(bundles.len());
    for b in &mut bundles {
        let p = tiler::compute_runtime_params(b, config)
            .map_err(|source| CompileError::Tiler { bundle: b.id, source })?;
        b.params = Some(p);
        params.push(p);
    }
    let plan = memory_planner::plan_memory(&bundles);
    Ok(Program { graph, bundles, params, plan })
}
