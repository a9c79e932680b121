//! Directed coupling topology.
//!
//! An edge `(from, to)` means the state of `from` enters the drift of `to`.
//! Node ids are zero-based in the library API.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphViolation {
    EmptyGraph,
    SelfLoop { node: NodeId },
    EndpointOutOfRange { from: NodeId, to: NodeId },
    DimensionTableLength { table: &'static str, len: usize },
    ZeroDimension { table: &'static str, node: NodeId },
}

impl fmt::Display for GraphViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphViolation::EmptyGraph => write!(f, "graph has no nodes"),
            GraphViolation::SelfLoop { node } => write!(f, "self-loop at node {node}"),
            GraphViolation::EndpointOutOfRange { from, to } => {
                write!(f, "endpoint out of range in edge ({from} -> {to})")
            }
            GraphViolation::DimensionTableLength { table, len } => {
                write!(f, "{table} has {len} entries, expected one per node")
            }
            GraphViolation::ZeroDimension { table, node } => {
                write!(f, "{table} is zero at node {node}")
            }
        }
    }
}

/// Incoming and outgoing neighbor ids of one node, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborSets {
    pub incoming: Vec<NodeId>,
    pub outgoing: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    node_count: usize,
    edges: BTreeSet<(NodeId, NodeId)>,
    state_dims: Vec<usize>,
    control_dims: Vec<usize>,
    neighbors: Vec<NeighborSets>,
}

impl NetworkGraph {
    /// Builds and validates a graph.
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        state_dims: Vec<usize>,
        control_dims: Vec<usize>,
    ) -> std::result::Result<Self, Vec<GraphViolation>> {
        let graph = Self::from_parts(node_count, edges, state_dims, control_dims);
        graph.validate()?;
        Ok(graph)
    }

    /// Graph where every node has scalar state and scalar control.
    pub fn scalar(
        node_count: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> std::result::Result<Self, Vec<GraphViolation>> {
        Self::new(node_count, edges, vec![1; node_count], vec![1; node_count])
    }

    /// Complete digraph on `node_count` scalar nodes.
    pub fn complete(node_count: usize) -> Self {
        let edges = (0..node_count)
            .flat_map(|a| (0..node_count).filter(move |&b| b != a).map(move |b| (a, b)));
        Self::scalar(node_count, edges).expect("complete graph is well formed")
    }

    /// Assembles a graph without checking invariants. Out-of-range and
    /// self-loop edges are kept in the edge set but never reported as
    /// neighbors; call [`NetworkGraph::validate`] to surface them.
    pub fn from_parts(
        node_count: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        state_dims: Vec<usize>,
        control_dims: Vec<usize>,
    ) -> Self {
        let edges: BTreeSet<_> = edges.into_iter().collect();
        let mut neighbors = vec![NeighborSets::default(); node_count];
        // BTreeSet iteration is ordered by (from, to), so pushes land sorted.
        for &(from, to) in &edges {
            if from == to || from >= node_count || to >= node_count {
                continue;
            }
            neighbors[from].outgoing.push(to);
        }
        for &(from, to) in &edges {
            if from == to || from >= node_count || to >= node_count {
                continue;
            }
            neighbors[to].incoming.push(from);
        }
        for n in &mut neighbors {
            n.incoming.sort_unstable();
            n.outgoing.sort_unstable();
        }
        Self {
            node_count,
            edges,
            state_dims,
            control_dims,
            neighbors,
        }
    }

    /// Checks every invariant and reports all violations found.
    pub fn validate(&self) -> std::result::Result<(), Vec<GraphViolation>> {
        let mut violations = Vec::new();
        if self.node_count == 0 {
            violations.push(GraphViolation::EmptyGraph);
        }
        for &(from, to) in &self.edges {
            if from >= self.node_count || to >= self.node_count {
                violations.push(GraphViolation::EndpointOutOfRange { from, to });
            } else if from == to {
                violations.push(GraphViolation::SelfLoop { node: from });
            }
        }
        for (table, dims) in [
            ("state_dims", &self.state_dims),
            ("control_dims", &self.control_dims),
        ] {
            if dims.len() != self.node_count {
                violations.push(GraphViolation::DimensionTableLength {
                    table,
                    len: dims.len(),
                });
            }
            for (node, &d) in dims.iter().enumerate() {
                if d == 0 {
                    violations.push(GraphViolation::ZeroDimension { table, node });
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn nodes(&self) -> std::ops::Range<NodeId> {
        0..self.node_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.edges.contains(&(from, to))
    }

    fn check(&self, i: NodeId) -> Result<()> {
        if i < self.node_count {
            Ok(())
        } else {
            Err(Error::Index {
                node: i,
                node_count: self.node_count,
            })
        }
    }

    /// Nodes whose state enters the drift of `i`, ascending.
    pub fn in_neighbors(&self, i: NodeId) -> Result<&[NodeId]> {
        self.check(i)?;
        Ok(&self.neighbors[i].incoming)
    }

    /// Nodes whose drift depends on the state of `i`, ascending.
    pub fn out_neighbors(&self, i: NodeId) -> Result<&[NodeId]> {
        self.check(i)?;
        Ok(&self.neighbors[i].outgoing)
    }

    pub fn neighbor_sets(&self, i: NodeId) -> Result<&NeighborSets> {
        self.check(i)?;
        Ok(&self.neighbors[i])
    }

    pub fn state_dim(&self, i: NodeId) -> Result<usize> {
        self.check(i)?;
        Ok(self.state_dims[i])
    }

    pub fn control_dim(&self, i: NodeId) -> Result<usize> {
        self.check(i)?;
        Ok(self.control_dims[i])
    }
}
