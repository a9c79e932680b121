//! Networked control-affine dynamics `ẋ_i = f_i(x_i, x_{N_i^+}) + g_i(x_i) u_i`.

mod integrator;
mod sis;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

pub use integrator::{rk4, rk4_step, vector_field};
pub use sis::{LieForms, SisModel, SisParams};

use crate::barrier::BarrierSpec;
use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::graph::{NetworkGraph, NodeId};

/// A node's own state together with the states it can see.
///
/// `one_hop` holds `x_j` for every incoming neighbor. `two_hop` holds, for
/// every incoming neighbor `j`, a snapshot of `j` with its own one-hop
/// neighborhood filled in (its `two_hop` is left empty).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodState {
    pub node: NodeId,
    pub self_state: DVector<f64>,
    pub one_hop: BTreeMap<NodeId, DVector<f64>>,
    pub two_hop: BTreeMap<NodeId, NeighborhoodState>,
}

impl NeighborhoodState {
    /// One-hop view of node `i`, enough to evaluate its drift.
    pub fn one_hop(graph: &NetworkGraph, states: &[DVector<f64>], i: NodeId) -> Result<Self> {
        check_states(graph, states)?;
        let one_hop = graph
            .in_neighbors(i)?
            .iter()
            .map(|&j| (j, states[j].clone()))
            .collect();
        Ok(Self {
            node: i,
            self_state: states[i].clone(),
            one_hop,
            two_hop: BTreeMap::new(),
        })
    }

    /// Full two-hop view of node `i`.
    pub fn snapshot(graph: &NetworkGraph, states: &[DVector<f64>], i: NodeId) -> Result<Self> {
        let mut nbr = Self::one_hop(graph, states, i)?;
        for &j in graph.in_neighbors(i)? {
            nbr.two_hop.insert(j, Self::one_hop(graph, states, j)?);
        }
        Ok(nbr)
    }

    /// Snapshots for every node of the graph.
    pub fn snapshot_all(graph: &NetworkGraph, states: &[DVector<f64>]) -> Result<Vec<Self>> {
        graph.nodes().map(|i| Self::snapshot(graph, states, i)).collect()
    }

    pub fn neighbor(&self, j: NodeId) -> Result<&DVector<f64>> {
        self.one_hop.get(&j).ok_or_else(|| {
            Error::ProtocolState(format!("node {} has no state for neighbor {j}", self.node))
        })
    }

    pub fn neighbor_view(&self, j: NodeId) -> Result<&NeighborhoodState> {
        self.two_hop.get(&j).ok_or_else(|| {
            Error::ProtocolState(format!("node {} has no two-hop view of neighbor {j}", self.node))
        })
    }

    /// Checks that the key sets match the graph. `two_hop` is only checked
    /// when `require_two_hop` is set.
    pub fn check(&self, graph: &NetworkGraph, require_two_hop: bool) -> Result<()> {
        let expected = graph.in_neighbors(self.node)?;
        if !self.one_hop.keys().copied().eq(expected.iter().copied()) {
            return Err(Error::ProtocolState(format!(
                "one-hop keys of node {} do not match its incoming neighbors {expected:?}",
                self.node
            )));
        }
        let dim = graph.state_dim(self.node)?;
        if self.self_state.len() != dim {
            return Err(Error::dim("self state", dim, self.self_state.len()));
        }
        if require_two_hop {
            if !self.two_hop.keys().copied().eq(expected.iter().copied()) {
                return Err(Error::ProtocolState(format!(
                    "two-hop keys of node {} do not match its incoming neighbors {expected:?}",
                    self.node
                )));
            }
            for view in self.two_hop.values() {
                view.check(graph, false)?;
            }
        }
        Ok(())
    }
}

fn check_states(graph: &NetworkGraph, states: &[DVector<f64>]) -> Result<()> {
    if states.len() != graph.node_count() {
        return Err(Error::dim("network state", graph.node_count(), states.len()));
    }
    for (i, x) in states.iter().enumerate() {
        let dim = graph.state_dim(i)?;
        if x.len() != dim {
            return Err(Error::dim("node state", dim, x.len()));
        }
    }
    Ok(())
}

/// Closed-form Lie derivatives of a node's barrier, everything needed to
/// assemble `ḧ_i` and `ψ²_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LieTable {
    pub lf_h: f64,
    pub lg_h: DVector<f64>,
    pub lf2_h: f64,
    pub lg2_h: DMatrix<f64>,
    /// `L_{f_j} L_{f_i} h_i` for each incoming neighbor `j`.
    pub lfj_lfi_h: BTreeMap<NodeId, f64>,
    /// `L_{g_j} L_{f_i} h_i` for each incoming neighbor `j`; this is `a_ij`.
    pub lgj_lfi_h: BTreeMap<NodeId, DVector<f64>>,
    pub lgi_lfi_h: DVector<f64>,
    pub lfi_lgi_h: DVector<f64>,
}

impl LieTable {
    pub fn is_finite(&self) -> bool {
        self.lf_h.is_finite()
            && self.lf2_h.is_finite()
            && self.lg_h.iter().all(|v| v.is_finite())
            && self.lg2_h.iter().all(|v| v.is_finite())
            && self.lfj_lfi_h.values().all(|v| v.is_finite())
            && self
                .lgj_lfi_h
                .values()
                .all(|a| a.iter().all(|v| v.is_finite()))
            && self.lgi_lfi_h.iter().all(|v| v.is_finite())
            && self.lfi_lgi_h.iter().all(|v| v.is_finite())
    }
}

/// A networked control-affine model.
pub trait NetworkModel: Send + Sync {
    fn graph(&self) -> &NetworkGraph;

    /// Control-free part `f_i(x_i, x_{N_i^+})`.
    fn drift(&self, i: NodeId, nbr: &NeighborhoodState) -> Result<DVector<f64>>;

    /// Input matrix `g_i(x_i)`, `N_i × M_i`.
    fn control_matrix(&self, i: NodeId, x_i: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Closed-form Lie derivatives of `barrier` at node `i`. `nbr` must be a
    /// full two-hop snapshot.
    fn lie_table(
        &self,
        _i: NodeId,
        _nbr: &NeighborhoodState,
        _barrier: &BarrierSpec,
    ) -> Result<LieTable> {
        Err(Error::UnsupportedModel)
    }

    /// Admissible control box `U_i`.
    fn control_bounds(&self, i: NodeId) -> BoxSet;

    /// Maps states back into the model's domain after an integration step
    /// and returns the largest correction applied.
    fn project_state(&self, _states: &mut [DVector<f64>]) -> f64 {
        0.0
    }
}
