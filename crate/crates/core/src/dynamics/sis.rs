//! Networked susceptible-infected-susceptible model with a controllable
//! healing rate:
//!
//! ```text
//! ẋ_i = -(γ_i + u_i) x_i + (1 - x_i) Σ_j β_ij x_j
//! ```
//!
//! `β_ii` is the on-node infection rate and `β_ij` (j ≠ i) the rate at which
//! node `j` infects node `i`. Each node carries the threshold barrier
//! `h_i = x̄_i - x_i`.

use nalgebra::{DMatrix, DVector};

use super::{LieTable, NeighborhoodState, NetworkModel};
use crate::barrier::BarrierSpec;
use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::graph::{NetworkGraph, NodeId};

/// Which closed forms to use for the second-order cross terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LieForms {
    /// Chain-rule derivatives of the SIS vector field.
    #[default]
    Exact,
    /// The commonly quoted table, where the neighbor cross terms carry an
    /// extra factor `x_j` and `L²_f h` omits the neighbor infection sum.
    /// Kept for comparison runs; it is not the derivative of the dynamics.
    Published,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SisParams {
    /// Row `i` holds the rates into node `i`.
    pub beta: DMatrix<f64>,
    pub gamma: DVector<f64>,
    /// Upper end of each control box `[0, ū_i]`.
    pub u_max: DVector<f64>,
}

impl SisParams {
    /// Same on-node rate, cross rate, healing rate and control bound on
    /// every node, with cross rates only along graph edges.
    pub fn homogeneous(
        graph: &NetworkGraph,
        beta_self: f64,
        beta_cross: f64,
        gamma: f64,
        u_max: f64,
    ) -> Self {
        let n = graph.node_count();
        let beta = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                beta_self
            } else if graph.has_edge(j, i) {
                beta_cross
            } else {
                0.0
            }
        });
        Self {
            beta,
            gamma: DVector::from_element(n, gamma),
            u_max: DVector::from_element(n, u_max),
        }
    }

    /// Lists every violated parameter constraint.
    pub fn violations(&self, graph: &NetworkGraph) -> Vec<String> {
        let n = graph.node_count();
        let mut out = Vec::new();
        if self.beta.shape() != (n, n) {
            out.push(format!("beta is {:?}, expected {n}x{n}", self.beta.shape()));
        }
        if self.gamma.len() != n {
            out.push(format!("gamma has {} entries, expected {n}", self.gamma.len()));
        }
        if self.u_max.len() != n {
            out.push(format!("u_max has {} entries, expected {n}", self.u_max.len()));
        }
        if !out.is_empty() {
            return out;
        }
        for i in 0..n {
            for j in 0..n {
                let b = self.beta[(i, j)];
                if !(b >= 0.0) || !b.is_finite() {
                    out.push(format!("beta[{i}][{j}] = {b} must be finite and nonnegative"));
                } else if i != j && (b > 0.0) != graph.has_edge(j, i) {
                    out.push(format!(
                        "beta[{i}][{j}] = {b} disagrees with edge ({j} -> {i}) presence"
                    ));
                }
            }
            if !(self.gamma[i] > 0.0) || !self.gamma[i].is_finite() {
                out.push(format!("gamma[{i}] = {} must be positive", self.gamma[i]));
            }
            if !(self.u_max[i] > 0.0) || !self.u_max[i].is_finite() {
                out.push(format!("u_max[{i}] = {} must be positive", self.u_max[i]));
            }
        }
        if graph.nodes().any(|i| {
            graph.state_dim(i).ok() != Some(1) || graph.control_dim(i).ok() != Some(1)
        }) {
            out.push("SIS nodes have scalar state and scalar control".into());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SisModel {
    graph: NetworkGraph,
    params: SisParams,
    forms: LieForms,
}

impl SisModel {
    pub fn new(graph: NetworkGraph, params: SisParams, forms: LieForms) -> Result<Self> {
        let violations = params.violations(&graph);
        if !violations.is_empty() {
            return Err(Error::ProtocolState(format!(
                "invalid SIS parameters: {}",
                violations.join("; ")
            )));
        }
        Ok(Self {
            graph,
            params,
            forms,
        })
    }

    pub fn params(&self) -> &SisParams {
        &self.params
    }

    pub fn forms(&self) -> LieForms {
        self.forms
    }

    fn scalar(x: &DVector<f64>) -> Result<f64> {
        if x.len() != 1 {
            return Err(Error::dim("SIS node state", 1, x.len()));
        }
        Ok(x[0])
    }

    /// Total infection pressure `Σ_j β_ij x_j`, including `β_ii x_i`.
    fn pressure(&self, i: NodeId, nbr: &NeighborhoodState) -> Result<f64> {
        let mut total = self.params.beta[(i, i)] * Self::scalar(&nbr.self_state)?;
        for &j in self.graph.in_neighbors(i)? {
            total += self.params.beta[(i, j)] * Self::scalar(nbr.neighbor(j)?)?;
        }
        Ok(total)
    }
}

impl NetworkModel for SisModel {
    fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    fn drift(&self, i: NodeId, nbr: &NeighborhoodState) -> Result<DVector<f64>> {
        let x = Self::scalar(&nbr.self_state)?;
        let f = -self.params.gamma[i] * x + (1.0 - x) * self.pressure(i, nbr)?;
        Ok(DVector::from_element(1, f))
    }

    fn control_matrix(&self, _i: NodeId, x_i: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, -Self::scalar(x_i)?))
    }

    fn lie_table(&self, i: NodeId, nbr: &NeighborhoodState, _barrier: &BarrierSpec) -> Result<LieTable> {
        let x = Self::scalar(&nbr.self_state)?;
        let beta_ii = self.params.beta[(i, i)];
        let gamma = self.params.gamma[i];
        let f_i = self.drift(i, nbr)?[0];

        let mut cross_sum = 0.0;
        let mut lfj_lfi_h = std::collections::BTreeMap::new();
        let mut lgj_lfi_h = std::collections::BTreeMap::new();
        for &j in self.graph.in_neighbors(i)? {
            let x_j = Self::scalar(nbr.neighbor(j)?)?;
            let beta_ij = self.params.beta[(i, j)];
            let f_j = self.drift(j, nbr.neighbor_view(j)?)?[0];
            cross_sum += beta_ij * x_j;
            let (lfj, lgj) = match self.forms {
                LieForms::Exact => (-(1.0 - x) * beta_ij * f_j, (1.0 - x) * beta_ij * x_j),
                LieForms::Published => (
                    -(1.0 - x) * beta_ij * x_j * f_j,
                    (1.0 - x) * beta_ij * x_j * x_j,
                ),
            };
            lfj_lfi_h.insert(j, lfj);
            lgj_lfi_h.insert(j, DVector::from_element(1, lgj));
        }

        // ∂f_i/∂x_i = (1 - 2x_i) β_ii - γ_i - Σ_{j≠i} β_ij x_j
        let df_dx = (1.0 - 2.0 * x) * beta_ii - gamma - cross_sum;
        let lf2_h = match self.forms {
            LieForms::Exact => -df_dx * f_i,
            LieForms::Published => (gamma - (1.0 - 2.0 * x) * beta_ii) * f_i,
        };

        let table = LieTable {
            lf_h: -f_i,
            lg_h: DVector::from_element(1, x),
            lf2_h,
            lg2_h: DMatrix::from_element(1, 1, -x),
            lfj_lfi_h,
            lgj_lfi_h,
            lgi_lfi_h: DVector::from_element(1, df_dx * x),
            lfi_lgi_h: DVector::from_element(1, f_i),
        };
        if !table.is_finite() {
            return Err(Error::Numerics { node: i });
        }
        Ok(table)
    }

    fn control_bounds(&self, i: NodeId) -> BoxSet {
        BoxSet::new(vec![0.0], vec![self.params.u_max[i]])
    }

    fn project_state(&self, states: &mut [DVector<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for x in states.iter_mut() {
            for v in x.iter_mut() {
                let c = v.clamp(0.0, 1.0);
                worst = worst.max((c - *v).abs());
                *v = c;
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_node_model(forms: LieForms) -> SisModel {
        let g = NetworkGraph::complete(3);
        let p = SisParams::homogeneous(&g, 0.5, 0.25, 0.3, 0.75);
        SisModel::new(g, p, forms).unwrap()
    }

    fn states(x: &[f64]) -> Vec<DVector<f64>> {
        x.iter().map(|&v| DVector::from_element(1, v)).collect()
    }

    fn barrier(threshold: f64) -> BarrierSpec {
        BarrierSpec::new(threshold, 1.0, 1.0)
    }

    #[test]
    fn drift_matches_hand_evaluation() {
        let m = three_node_model(LieForms::Exact);
        let xs = states(&[0.04, 0.01, 0.02]);
        let nbr = NeighborhoodState::one_hop(m.graph(), &xs, 0).unwrap();
        let f = m.drift(0, &nbr).unwrap()[0];
        assert!((f - 0.0144).abs() < 1e-15, "{f}");
    }

    #[test]
    fn drift_vanishes_at_disease_free_state() {
        let m = three_node_model(LieForms::Exact);
        let xs = states(&[0.0, 0.0, 0.0]);
        for i in 0..3 {
            let nbr = NeighborhoodState::one_hop(m.graph(), &xs, i).unwrap();
            assert_eq!(m.drift(i, &nbr).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn fully_infected_node_only_recovers() {
        let m = three_node_model(LieForms::Exact);
        let xs = states(&[0.0, 1.0, 0.0]);
        let nbr = NeighborhoodState::one_hop(m.graph(), &xs, 1).unwrap();
        assert_eq!(m.drift(1, &nbr).unwrap()[0], -0.3);
    }

    #[test]
    fn control_matrix_is_negative_state() {
        let m = three_node_model(LieForms::Exact);
        for (x, g) in [(0.0, 0.0), (0.5, -0.5), (1.0, -1.0)] {
            let got = m.control_matrix(0, &DVector::from_element(1, x)).unwrap();
            assert_eq!(got[(0, 0)], g);
        }
    }

    #[test]
    fn wrong_state_dimension_is_rejected() {
        let m = three_node_model(LieForms::Exact);
        let err = m.control_matrix(0, &DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn published_cross_term_example() {
        let m = three_node_model(LieForms::Published);
        let xs = states(&[0.1, 0.2, 0.3]);
        let nbr = NeighborhoodState::snapshot(m.graph(), &xs, 0).unwrap();
        let lie = m.lie_table(0, &nbr, &barrier(0.1)).unwrap();
        assert!((lie.lgj_lfi_h[&1][0] - 0.009).abs() < 1e-15);
        assert_eq!(lie.lg_h[0], 0.1);
    }

    #[test]
    fn exact_cross_term_matches_finite_difference() {
        // a_ij is the sensitivity of L_f h_i to moving x_j along g_j.
        let m = three_node_model(LieForms::Exact);
        let xs = states(&[0.1, 0.2, 0.3]);
        let nbr = NeighborhoodState::snapshot(m.graph(), &xs, 0).unwrap();
        let lie = m.lie_table(0, &nbr, &barrier(0.1)).unwrap();
        assert!((lie.lgj_lfi_h[&1][0] - 0.9 * 0.25 * 0.2).abs() < 1e-15);

        let eps = 1e-6;
        let lf_h = |x1: f64| {
            let xs = states(&[0.1, x1, 0.3]);
            let nbr = NeighborhoodState::one_hop(m.graph(), &xs, 0).unwrap();
            -m.drift(0, &nbr).unwrap()[0]
        };
        let g1 = -0.2;
        let fd = (lf_h(0.2 + eps * g1) - lf_h(0.2 - eps * g1)) / (2.0 * eps);
        assert!((fd - lie.lgj_lfi_h[&1][0]).abs() < 1e-9, "{fd}");
    }

    #[test]
    fn zero_neighbor_state_gives_zero_coupling() {
        for forms in [LieForms::Exact, LieForms::Published] {
            let m = three_node_model(forms);
            let xs = states(&[0.3, 0.0, 0.2]);
            let nbr = NeighborhoodState::snapshot(m.graph(), &xs, 0).unwrap();
            let lie = m.lie_table(0, &nbr, &barrier(0.1)).unwrap();
            assert_eq!(lie.lgj_lfi_h[&1][0], 0.0);
        }
    }

    #[test]
    fn lie_table_needs_two_hop_views() {
        let m = three_node_model(LieForms::Exact);
        let xs = states(&[0.1, 0.2, 0.3]);
        let nbr = NeighborhoodState::one_hop(m.graph(), &xs, 0).unwrap();
        assert!(matches!(
            m.lie_table(0, &nbr, &barrier(0.1)),
            Err(Error::ProtocolState(_))
        ));
    }

    #[test]
    fn parameter_violations_are_listed() {
        let g = NetworkGraph::scalar(2, [(1, 0)]).unwrap();
        let p = SisParams {
            beta: DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.1, -0.5]),
            gamma: DVector::from_vec(vec![0.3, 0.0]),
            u_max: DVector::from_vec(vec![0.75, 0.75]),
        };
        let v = p.violations(&g);
        assert_eq!(v.len(), 3, "{v:?}");
    }
}
