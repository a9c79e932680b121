use nalgebra::DVector;
use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("node {node} is not in the graph (node count {node_count})")]
    Index { node: NodeId, node_count: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("model does not provide closed-form Lie derivatives")]
    UnsupportedModel,

    #[error("non-finite derivative at node {node}")]
    Numerics { node: NodeId },

    #[error("protocol state error: {0}")]
    ProtocolState(String),

    #[error("control region is empty")]
    EmptyRegion,

    #[error("request polytope is empty")]
    EmptyPolytope,

    #[error("alternating projection did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    GeometryConvergence {
        sweeps: usize,
        residual: f64,
        last_iterate: DVector<f64>,
    },

    #[error("all eligible partition weights vanish with nonzero capability {capability}")]
    DegenerateWeights { capability: f64 },

    #[error("collaboration stalled after {sub_rounds} sub-rounds\n{dump}")]
    ProtocolStall { sub_rounds: usize, dump: String },

    #[error("terminally infeasible state: nodes {nodes:?} keep a deficit with every neighbor constrained")]
    TerminallyInfeasible { nodes: Vec<NodeId> },

    #[error("at t = {time}: {source}")]
    AtTime {
        time: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    /// Strips any [`Error::AtTime`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            other => other,
        }
    }
}
