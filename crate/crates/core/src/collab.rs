//! Round-based negotiation of shared safety responsibility.
//!
//! Every node `i` owns a [`CollabLedger`]. One protocol invocation
//! ([`Collaboration::run`]) repeats an outer loop: recompute each node's
//! capability `c̄_i` over its current region, then run synchronous
//! sub-rounds in which nodes
//!
//! 1. split their deficit `δ_i = c̄_i - Σ_j c̄_ij` over unconstrained
//!    incoming neighbors and send the shares as requests,
//! 2. fold the requests they receive into halfspaces on their own control
//!    and answer with nonnegative adjustments when the box cannot meet them,
//! 3. book `c̄_ij ← c̄_ij + δ_ij + ε_ij` and mark adjusted neighbors as
//!    constrained.
//!
//! The outer loop ends once no node has a deficit left. All iteration is in
//! ascending node order, so a run is a pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use nalgebra::DVector;

use crate::barrier::{max_capability, QuadraticForm};
use crate::error::{Error, Result};
use crate::geometry::{closest_point, intersect, BoxSet, ControlRegion, Halfspace};
use crate::graph::{NetworkGraph, NodeId};

/// Coupling magnitudes below this get zero partition weight.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Adjustments at or below this are treated as zero.
pub const ADJUSTMENT_TOL: f64 = 1e-12;
/// Default for [`ProtocolConfig::deficit_tol`].
pub const DEFICIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageKind {
    Request,
    Adjustment,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::Request => "request",
            MessageKind::Adjustment => "adjustment",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabMessage {
    pub kind: MessageKind,
    pub from: NodeId,
    pub to: NodeId,
    pub value: f64,
    /// Sub-round counter, cumulative over the outer iterations of one run.
    pub sub_round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `w_ij = ‖a_ij‖₁`.
    #[default]
    CouplingNorm,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub outer_cap: usize,
    pub inner_cap: usize,
    pub weighting: Weighting,
    /// Deficits above `-deficit_tol` count as met. The capability/deficit
    /// feedback between neighbors only contracts geometrically, so an exact
    /// zero is not reachable in finitely many rounds.
    pub deficit_tol: f64,
    /// Keep a ledger snapshot after every sub-round.
    pub record_history: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            outer_cap: 16,
            inner_cap: 64,
            weighting: Weighting::CouplingNorm,
            deficit_tol: DEFICIT_TOL,
            record_history: false,
        }
    }
}

/// What one node contributes to a protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInput {
    /// `a_ij` for every incoming neighbor `j`.
    pub coupling: BTreeMap<NodeId, DVector<f64>>,
    /// `c_i(u_i)`.
    pub self_term: QuadraticForm,
    pub bounds: BoxSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabLedger {
    pub node: NodeId,
    pub bounds: BoxSet,
    /// `c̄_ij`: responsibility allocated to incoming neighbor `j`.
    pub out_alloc: BTreeMap<NodeId, f64>,
    /// `c̄_ki`: responsibility accepted from outgoing neighbor `k`.
    pub in_req: BTreeMap<NodeId, f64>,
    pub constrained: BTreeSet<NodeId>,
    pub capability: f64,
    pub capability_argmax: DVector<f64>,
    pub deficit: f64,
    /// Outer iterations run so far.
    pub round: usize,
    pub region: ControlRegion,
}

impl CollabLedger {
    pub fn new(graph: &NetworkGraph, node: NodeId, bounds: BoxSet) -> Result<Self> {
        let out_alloc = graph.in_neighbors(node)?.iter().map(|&j| (j, 0.0)).collect();
        let in_req = graph.out_neighbors(node)?.iter().map(|&k| (k, 0.0)).collect();
        let m = bounds.dim();
        Ok(Self {
            node,
            region: ControlRegion::full(bounds.clone()),
            bounds,
            out_alloc,
            in_req,
            constrained: BTreeSet::new(),
            capability: 0.0,
            capability_argmax: DVector::zeros(m),
            deficit: 0.0,
            round: 0,
        })
    }

    pub fn allocated(&self) -> f64 {
        self.out_alloc.values().sum()
    }

    /// Responsibility not yet handed to any neighbor.
    pub fn residual_deficit(&self) -> f64 {
        self.capability - self.allocated()
    }

    fn state_key(&self) -> (&BTreeMap<NodeId, f64>, &BTreeMap<NodeId, f64>, f64, &ControlRegion) {
        (&self.out_alloc, &self.in_req, self.capability, &self.region)
    }
}

impl fmt::Display for CollabLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "node {}: round {} capability {:.6e} deficit {:.6e} out {:?} in {:?} constrained {:?}",
            self.node, self.round, self.capability, self.deficit, self.out_alloc, self.in_req, self.constrained
        )?;
        match self.region.frozen_point() {
            Some(p) => write!(f, " frozen at {:?}", p.as_slice()),
            None => write!(f, " {} request halfspaces", self.region.requests().len()),
        }
    }
}

/// Splits `capability` over the non-excluded keys of `weights` in
/// proportion to their weights.
///
/// Excluded neighbors get exactly zero. Fails with
/// [`Error::DegenerateWeights`] when no eligible weight is positive but the
/// capability is nonzero.
pub fn partition(
    capability: f64,
    weights: &BTreeMap<NodeId, f64>,
    excluded: &BTreeSet<NodeId>,
) -> Result<BTreeMap<NodeId, f64>> {
    let total: f64 = weights
        .iter()
        .filter(|(j, _)| !excluded.contains(j))
        .map(|(_, w)| w.max(0.0))
        .sum();
    if !(total > 0.0) {
        if capability == 0.0 {
            return Ok(weights.keys().map(|&j| (j, 0.0)).collect());
        }
        return Err(Error::DegenerateWeights { capability });
    }
    Ok(weights
        .iter()
        .map(|(&j, &w)| {
            let share = if excluded.contains(&j) {
                0.0
            } else {
                capability * w.max(0.0) / total
            };
            (j, share)
        })
        .collect())
}

/// Folds incoming requests into `ledger.region` and returns the adjustment
/// owed to each requester.
///
/// `deltas[k]` is the new request `δ_ki` (missing means zero) and
/// `normals[k]` is `a_ki`. Every outgoing neighbor in `ledger.in_req` must
/// have a normal.
pub fn coordinate(
    ledger: &mut CollabLedger,
    deltas: &BTreeMap<NodeId, f64>,
    normals: &BTreeMap<NodeId, DVector<f64>>,
) -> Result<BTreeMap<NodeId, f64>> {
    if ledger.in_req.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut halfspaces = Vec::with_capacity(ledger.in_req.len());
    let mut offsets = BTreeMap::new();
    for (&k, &current) in &ledger.in_req {
        let a = normals.get(&k).ok_or_else(|| {
            Error::ProtocolState(format!("node {} has no coupling vector from {k}", ledger.node))
        })?;
        let offset = current + deltas.get(&k).copied().unwrap_or(0.0);
        offsets.insert(k, offset);
        halfspaces.push(Halfspace::new(a.clone(), offset));
    }

    let candidate = intersect(&ledger.bounds, halfspaces.clone())?;
    let mut adjustments: BTreeMap<NodeId, f64> = offsets.keys().map(|&k| (k, 0.0)).collect();
    if candidate.is_empty() {
        let compromise = closest_point(&ledger.bounds, &halfspaces)?.point;
        for (&k, &offset) in &offsets {
            let slack = normals[&k].dot(&compromise) + offset;
            if slack < -ADJUSTMENT_TOL {
                adjustments.insert(k, -slack);
            }
        }
        ledger.region = ControlRegion::frozen(ledger.bounds.clone(), halfspaces, compromise);
    } else {
        ledger.region = candidate;
    }
    for (k, offset) in offsets {
        ledger.in_req.insert(k, offset + adjustments[&k]);
    }
    Ok(adjustments)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolStatus {
    /// Every deficit met.
    Converged,
    /// Outer cap hit (or no further progress) with deficits left at nodes
    /// that still had unconstrained neighbors. Regions are still valid.
    CapReached(Vec<NodeId>),
    /// Nodes left in deficit with every neighbor constrained.
    TerminallyInfeasible(Vec<NodeId>),
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub status: ProtocolStatus,
    pub ledgers: Vec<CollabLedger>,
    pub outer_rounds: usize,
    pub inner_rounds: usize,
    pub messages: Vec<CollabMessage>,
    /// Largest `|Σ_j δ_ij - δ_i|` seen in any partition.
    pub max_conservation_residual: f64,
    /// Ledger snapshots after every sub-round, when requested.
    pub history: Vec<Vec<CollabLedger>>,
}

impl ProtocolOutcome {
    pub fn regions(&self) -> Vec<ControlRegion> {
        self.ledgers.iter().map(|l| l.region.clone()).collect()
    }
}

/// Stats of one Collaborate call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollaborateStats {
    pub sub_rounds: usize,
}

/// Protocol engine over all nodes of a graph.
pub struct Collaboration<'a> {
    graph: &'a NetworkGraph,
    inputs: &'a [NodeInput],
    config: ProtocolConfig,
    ledgers: Vec<CollabLedger>,
    weights: Vec<BTreeMap<NodeId, f64>>,
    messages: Vec<CollabMessage>,
    sub_round: usize,
    max_residual: f64,
    history: Vec<Vec<CollabLedger>>,
}

impl<'a> Collaboration<'a> {
    pub fn new(graph: &'a NetworkGraph, inputs: &'a [NodeInput], config: ProtocolConfig) -> Result<Self> {
        if inputs.len() != graph.node_count() {
            return Err(Error::dim("protocol inputs", graph.node_count(), inputs.len()));
        }
        let mut ledgers = Vec::with_capacity(inputs.len());
        let mut weights = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let expected = graph.in_neighbors(i)?;
            if !input.coupling.keys().copied().eq(expected.iter().copied()) {
                return Err(Error::ProtocolState(format!(
                    "coupling of node {i} is not keyed by its incoming neighbors {expected:?}"
                )));
            }
            for (&j, a) in &input.coupling {
                if a.len() != inputs[j].bounds.dim() {
                    return Err(Error::dim("coupling vector", inputs[j].bounds.dim(), a.len()));
                }
            }
            if input.self_term.dim() != input.bounds.dim() {
                return Err(Error::dim("capability form", input.bounds.dim(), input.self_term.dim()));
            }
            ledgers.push(CollabLedger::new(graph, i, input.bounds.clone())?);
            weights.push(
                input
                    .coupling
                    .iter()
                    .map(|(&j, a)| {
                        let w = match config.weighting {
                            Weighting::CouplingNorm => a.lp_norm(1),
                            Weighting::Uniform => 1.0,
                        };
                        (j, if w < WEIGHT_FLOOR { 0.0 } else { w })
                    })
                    .collect(),
            );
        }
        Ok(Self {
            graph,
            inputs,
            config,
            ledgers,
            weights,
            messages: Vec::new(),
            sub_round: 0,
            max_residual: 0.0,
            history: Vec::new(),
        })
    }

    /// Seeds the allocations from an earlier run instead of zero.
    pub fn with_allocations(mut self, previous: &[CollabLedger]) -> Self {
        for (ledger, prev) in self.ledgers.iter_mut().zip(previous) {
            for (j, v) in ledger.out_alloc.iter_mut() {
                *v = prev.out_alloc.get(j).copied().unwrap_or(0.0);
            }
            for (k, v) in ledger.in_req.iter_mut() {
                *v = prev.in_req.get(k).copied().unwrap_or(0.0);
            }
        }
        self
    }

    pub fn ledgers(&self) -> &[CollabLedger] {
        &self.ledgers
    }

    pub fn messages(&self) -> &[CollabMessage] {
        &self.messages
    }

    fn dump(&self) -> String {
        let mut s = String::new();
        for l in &self.ledgers {
            let _ = writeln!(s, "  {l}");
        }
        s
    }

    /// Recomputes `c̄_i` over each node's current region.
    pub fn update_capabilities(&mut self) -> Result<()> {
        for (ledger, input) in self.ledgers.iter_mut().zip(self.inputs) {
            let cap = max_capability(&input.self_term, &ledger.region)?;
            ledger.capability = cap.value;
            ledger.capability_argmax = cap.argmax;
        }
        Ok(())
    }

    fn shares(&self, i: NodeId, deficit: f64) -> Result<BTreeMap<NodeId, f64>> {
        let ledger = &self.ledgers[i];
        match partition(deficit, &self.weights[i], &ledger.constrained) {
            Err(Error::DegenerateWeights { .. }) => {
                log::info!("node {i}: all partition weights vanish, splitting {deficit:.3e} uniformly");
                let uniform = self.weights[i].keys().map(|&j| (j, 1.0)).collect();
                partition(deficit, &uniform, &ledger.constrained)
            }
            other => other,
        }
    }

    /// One Collaborate call: synchronous sub-rounds until every node has
    /// stopped requesting.
    pub fn collaborate(&mut self) -> Result<CollaborateStats> {
        let n = self.graph.node_count();
        for ledger in &mut self.ledgers {
            ledger.constrained.clear();
        }
        let mut active = vec![true; n];
        let mut sub_rounds = 0;
        while active.iter().any(|&a| a) {
            if sub_rounds == self.config.inner_cap {
                return Err(Error::ProtocolStall {
                    sub_rounds,
                    dump: self.dump(),
                });
            }
            sub_rounds += 1;
            self.sub_round += 1;
            let round = self.sub_round;

            // Requests.
            let mut sent: Vec<BTreeMap<NodeId, f64>> = vec![BTreeMap::new(); n];
            let mut received: Vec<BTreeMap<NodeId, f64>> = vec![BTreeMap::new(); n];
            for i in 0..n {
                if !active[i] {
                    continue;
                }
                let deficit = self.ledgers[i].residual_deficit();
                self.ledgers[i].deficit = deficit;
                let in_nbrs = self.graph.in_neighbors(i)?;
                if in_nbrs.iter().all(|j| self.ledgers[i].constrained.contains(j)) {
                    continue;
                }
                let shares = self.shares(i, deficit)?;
                let distributed: f64 = shares.values().sum();
                self.max_residual = self.max_residual.max((distributed - deficit).abs());
                for (&j, &share) in &shares {
                    if self.ledgers[i].constrained.contains(&j) {
                        continue;
                    }
                    self.messages.push(CollabMessage {
                        kind: MessageKind::Request,
                        from: i,
                        to: j,
                        value: share,
                        sub_round: round,
                    });
                    sent[i].insert(j, share);
                    received[j].insert(i, share);
                }
            }

            // Coordination.
            let mut adjustments: Vec<BTreeMap<NodeId, f64>> = vec![BTreeMap::new(); n];
            for i in 0..n {
                let normals: BTreeMap<NodeId, DVector<f64>> = self
                    .graph
                    .out_neighbors(i)?
                    .iter()
                    .map(|&k| (k, self.inputs[k].coupling[&i].clone()))
                    .collect();
                let eps = coordinate(&mut self.ledgers[i], &received[i], &normals)?;
                for (&k, &e) in &eps {
                    self.messages.push(CollabMessage {
                        kind: MessageKind::Adjustment,
                        from: i,
                        to: k,
                        value: e,
                        sub_round: round,
                    });
                }
                adjustments[i] = eps;
            }

            // Bookkeeping and termination.
            for i in 0..n {
                let mut any_adjustment = adjustments[i].values().any(|&e| e > 0.0);
                let in_nbrs = self.graph.in_neighbors(i)?;
                for &j in in_nbrs {
                    let delta = sent[i].get(&j).copied().unwrap_or(0.0);
                    let eps = adjustments[j].get(&i).copied().unwrap_or(0.0);
                    *self.ledgers[i].out_alloc.get_mut(&j).expect("ledger keyed by neighbors") += delta + eps;
                    if eps > 0.0 {
                        self.ledgers[i].constrained.insert(j);
                        any_adjustment = true;
                    }
                }
                if active[i] {
                    let saturated = in_nbrs.iter().all(|j| self.ledgers[i].constrained.contains(j));
                    if saturated || !any_adjustment {
                        active[i] = false;
                    }
                }
            }
            if self.config.record_history {
                self.history.push(self.ledgers.clone());
            }
        }
        Ok(CollaborateStats { sub_rounds })
    }

    /// Full protocol: repeat capability update and Collaborate until every
    /// deficit is met.
    pub fn run(mut self) -> Result<ProtocolOutcome> {
        let n = self.graph.node_count();
        let mut outer = 0;
        let mut inner = 0;
        loop {
            outer += 1;
            let before: Vec<_> = self.ledgers.iter().map(|l| l.state_key()).map(clone_key).collect();
            for ledger in &mut self.ledgers {
                ledger.round += 1;
            }
            self.update_capabilities()?;
            inner += self.collaborate()?.sub_rounds;
            // Accepted requests may have shrunk regions since the capabilities
            // were computed; judge the deficits against the final regions.
            self.update_capabilities()?;
            for ledger in &mut self.ledgers {
                ledger.deficit = ledger.residual_deficit();
            }

            let short: Vec<NodeId> = (0..n)
                .filter(|&i| self.ledgers[i].deficit < -self.config.deficit_tol)
                .collect();
            if short.is_empty() {
                return Ok(self.finish(ProtocolStatus::Converged, outer, inner));
            }
            let after: Vec<_> = self.ledgers.iter().map(|l| l.state_key()).map(clone_key).collect();
            if before == after || outer == self.config.outer_cap {
                let saturated: Vec<NodeId> = short
                    .iter()
                    .copied()
                    .filter(|&i| {
                        self.graph
                            .in_neighbors(i)
                            .map(|nb| nb.iter().all(|j| self.ledgers[i].constrained.contains(j)))
                            .unwrap_or(false)
                    })
                    .collect();
                if !saturated.is_empty() {
                    log::debug!("terminally infeasible at nodes {saturated:?}");
                    return Ok(self.finish(ProtocolStatus::TerminallyInfeasible(saturated), outer, inner));
                }
                log::debug!("outer loop stopped after {outer} rounds with deficits at {short:?}");
                return Ok(self.finish(ProtocolStatus::CapReached(short), outer, inner));
            }
        }
    }

    fn finish(self, status: ProtocolStatus, outer_rounds: usize, inner_rounds: usize) -> ProtocolOutcome {
        ProtocolOutcome {
            status,
            ledgers: self.ledgers,
            outer_rounds,
            inner_rounds,
            messages: self.messages,
            max_conservation_residual: self.max_residual,
            history: self.history,
        }
    }
}

type LedgerKey = (BTreeMap<NodeId, f64>, BTreeMap<NodeId, f64>, f64, ControlRegion);

fn clone_key(k: (&BTreeMap<NodeId, f64>, &BTreeMap<NodeId, f64>, f64, &ControlRegion)) -> LedgerKey {
    (k.0.clone(), k.1.clone(), k.2, k.3.clone())
}

/// Runs the protocol and returns each node's admissible region.
pub fn collaborative_safety(
    graph: &NetworkGraph,
    inputs: &[NodeInput],
    config: ProtocolConfig,
) -> Result<Vec<ControlRegion>> {
    let outcome = Collaboration::new(graph, inputs, config)?.run()?;
    match outcome.status {
        ProtocolStatus::Converged => Ok(outcome.regions()),
        ProtocolStatus::CapReached(ref nodes) => {
            log::warn!("protocol stopped with residual deficits at nodes {nodes:?}");
            Ok(outcome.regions())
        }
        ProtocolStatus::TerminallyInfeasible(nodes) => Err(Error::TerminallyInfeasible { nodes }),
    }
}
