//! Closed-loop simulation: at every step the nodes snapshot their two-hop
//! neighborhood, negotiate admissible regions, filter their nominal controls
//! and the network is advanced by one RK4 step.

mod output;

use nalgebra::DVector;

pub use output::{write_messages_csv, write_result_csv};

use crate::barrier::{decompose_psi2, max_capability, psi1, psi1_halfspace, BarrierSpec, QuadraticForm, UdotModel};
use crate::collab::{CollabLedger, CollabMessage, Collaboration, NodeInput, ProtocolConfig, ProtocolStatus};
use crate::dynamics::{rk4_step, LieTable, NeighborhoodState, NetworkModel};
use crate::error::{Error, Result};
use crate::geometry::{ControlRegion, FEASIBILITY_TOL};
use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Constant nominal control per node.
    pub nominal: Vec<DVector<f64>>,
    pub protocol: ProtocolConfig,
    /// Off: every node filters inside its full box and no requests are sent.
    pub collaboration: bool,
    /// Keep every protocol message in the result.
    pub trace: bool,
    /// Keep going with best-effort controls at terminally infeasible states.
    pub continue_on_infeasible: bool,
    /// Carry `c̄_ij` / `c̄_ki` over from the previous step instead of
    /// starting every step from zero.
    pub persist_requests: bool,
}

impl SimConfig {
    /// Defaults with zero nominal control for `n` scalar-control nodes.
    pub fn new(n: usize) -> Self {
        Self {
            dt: 0.01,
            t_final: 100.0,
            nominal: vec![DVector::zeros(1); n],
            protocol: ProtocolConfig::default(),
            collaboration: true,
            trace: false,
            continue_on_infeasible: false,
            persist_requests: false,
        }
    }

    /// Number of integration steps; the result has one more row.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::ProtocolState(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(Error::ProtocolState(format!("horizon must be nonnegative, got {}", self.t_final)));
        }
        Ok((self.t_final / self.dt).round() as usize)
    }
}

/// A protocol message stamped with the simulation time it was sent at.
#[derive(Debug, Clone, PartialEq)]
pub struct TracedMessage {
    pub time: f64,
    pub message: CollabMessage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibleEvent {
    pub time: f64,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioResult {
    pub times: Vec<f64>,
    /// Per row, one state vector per node.
    pub states: Vec<Vec<DVector<f64>>>,
    pub controls: Vec<Vec<DVector<f64>>>,
    /// Per row, `c̄_i` after the last outer iteration of the protocol.
    pub capabilities: Vec<Vec<f64>>,
    /// Per row, `(outer, inner)` protocol iterations.
    pub rounds: Vec<(usize, usize)>,
    /// Per row, `min(h_i, 0)`.
    pub violations: Vec<Vec<f64>>,
    /// Per row, whether the node's `ψ¹` condition had to be relaxed.
    pub filter_relaxed: Vec<Vec<bool>>,
    pub infeasible: Vec<InfeasibleEvent>,
    /// The run stopped early at a terminally infeasible state.
    pub halted: bool,
    pub messages: Vec<TracedMessage>,
    /// Largest partition conservation error over the whole run.
    pub max_conservation_residual: f64,
}

impl ScenarioResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Smallest barrier value of each node over the run, or `0` when never
    /// violated.
    pub fn worst_violation(&self) -> Vec<f64> {
        let n = self.violations.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| self.violations.iter().map(|row| row[i]).fold(0.0, f64::min))
            .collect()
    }

    fn push_row(&mut self, row: Row) {
        self.times.push(row.time);
        self.states.push(row.states);
        self.controls.push(row.controls);
        self.capabilities.push(row.capabilities);
        self.rounds.push(row.rounds);
        self.violations.push(row.violations);
        self.filter_relaxed.push(row.relaxed);
    }
}

struct Row {
    time: f64,
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    capabilities: Vec<f64>,
    rounds: (usize, usize),
    violations: Vec<f64>,
    relaxed: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub control: DVector<f64>,
    /// `ψ¹ ≥ 0` was unreachable inside the region; `control` maximizes `ψ¹`
    /// there instead.
    pub relaxed: bool,
}

/// Closest control to `nominal` in `region ∩ {ψ¹ ≥ 0}`.
///
/// When that set is empty the control maximizing `ψ¹` over the region is
/// returned and flagged.
pub fn safety_filter(
    nominal: &DVector<f64>,
    region: &ControlRegion,
    spec: &BarrierSpec,
    lie: &LieTable,
    x_i: &DVector<f64>,
) -> Result<FilterOutcome> {
    if nominal.len() != region.dim() {
        return Err(Error::dim("nominal control", region.dim(), nominal.len()));
    }
    if let Some(p) = region.frozen_point() {
        let relaxed = psi1(spec, lie, x_i, p)? < -FEASIBILITY_TOL;
        return Ok(FilterOutcome {
            control: p.clone(),
            relaxed,
        });
    }
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let guarded = region.with_halfspace(psi1_halfspace(spec, lie, x_i))?;
    if !guarded.is_empty() {
        let control = guarded.project(nominal)?;
        return Ok(FilterOutcome {
            control,
            relaxed: false,
        });
    }
    let hs = psi1_halfspace(spec, lie, x_i);
    let best = max_capability(&QuadraticForm::affine(hs.offset, hs.normal.clone()), region)?;
    log::debug!("ψ¹ unreachable in region, relaxing to {:?}", best.argmax.as_slice());
    Ok(FilterOutcome {
        control: best.argmax,
        relaxed: true,
    })
}

fn check_inputs<M: NetworkModel + ?Sized>(
    model: &M,
    barriers: &[BarrierSpec],
    x0: &[DVector<f64>],
    config: &SimConfig,
) -> Result<usize> {
    let graph = model.graph();
    let n = graph.node_count();
    if barriers.len() != n {
        return Err(Error::dim("barrier list", n, barriers.len()));
    }
    if x0.len() != n {
        return Err(Error::dim("initial state", n, x0.len()));
    }
    if config.nominal.len() != n {
        return Err(Error::dim("nominal controls", n, config.nominal.len()));
    }
    for i in graph.nodes() {
        if x0[i].len() != graph.state_dim(i)? {
            return Err(Error::dim("node initial state", graph.state_dim(i)?, x0[i].len()));
        }
        if config.nominal[i].len() != graph.control_dim(i)? {
            return Err(Error::dim("node nominal control", graph.control_dim(i)?, config.nominal[i].len()));
        }
    }
    config.steps()
}

fn at(time: f64) -> impl Fn(Error) -> Error {
    move |e| Error::AtTime {
        time,
        source: Box::new(e),
    }
}

/// Closed-loop run of the collaborative safety filter.
///
/// A terminally infeasible state either halts the run (the returned result
/// ends at that row and has `halted` set) or, with
/// `continue_on_infeasible`, is logged and the best-effort regions are used.
pub fn run_scenario<M: NetworkModel + ?Sized>(
    model: &M,
    barriers: &[BarrierSpec],
    x0: &[DVector<f64>],
    config: &SimConfig,
) -> Result<ScenarioResult> {
    let steps = check_inputs(model, barriers, x0, config)?;
    let graph = model.graph();
    let n = graph.node_count();
    let mut result = ScenarioResult::default();
    let mut states = x0.to_vec();
    let mut prev_controls: Option<Vec<DVector<f64>>> = None;
    let mut prev_ledgers: Option<Vec<CollabLedger>> = None;

    for k in 0..=steps {
        let t = k as f64 * config.dt;
        let wrap = at(t);
        let snapshots = NeighborhoodState::snapshot_all(graph, &states).map_err(&wrap)?;
        let mut lies = Vec::with_capacity(n);
        let mut inputs = Vec::with_capacity(n);
        for i in 0..n {
            let lie = model.lie_table(i, &snapshots[i], &barriers[i]).map_err(&wrap)?;
            if !lie.is_finite() {
                return Err(wrap(Error::Numerics { node: i }));
            }
            let m = graph.control_dim(i)?;
            let udot = UdotModel::from_policy(
                barriers[i].udot,
                prev_controls.as_ref().map(|u| &u[i]),
                config.dt,
                m,
            );
            let d = decompose_psi2(&barriers[i], &lie, &snapshots[i], &udot).map_err(&wrap)?;
            inputs.push(NodeInput {
                coupling: d.coupling,
                self_term: d.self_term,
                bounds: model.control_bounds(i),
            });
            lies.push(lie);
        }

        let (regions, capabilities, rounds) = if config.collaboration {
            let mut engine = Collaboration::new(graph, &inputs, config.protocol.clone()).map_err(&wrap)?;
            if config.persist_requests {
                if let Some(prev) = &prev_ledgers {
                    engine = engine.with_allocations(prev);
                }
            }
            let outcome = engine.run().map_err(&wrap)?;
            if let ProtocolStatus::TerminallyInfeasible(nodes) = &outcome.status {
                log::warn!("t = {t}: terminally infeasible at nodes {nodes:?}");
                result.infeasible.push(InfeasibleEvent {
                    time: t,
                    nodes: nodes.clone(),
                });
                if !config.continue_on_infeasible {
                    result.halted = true;
                }
            }
            result.max_conservation_residual =
                result.max_conservation_residual.max(outcome.max_conservation_residual);
            if config.trace {
                result.messages.extend(outcome.messages.iter().map(|m| TracedMessage {
                    time: t,
                    message: m.clone(),
                }));
            }
            let caps = outcome.ledgers.iter().map(|l| l.capability).collect();
            let regions = outcome.regions();
            prev_ledgers = Some(outcome.ledgers);
            (regions, caps, (outcome.outer_rounds, outcome.inner_rounds))
        } else {
            let regions: Vec<_> = inputs.iter().map(|inp| ControlRegion::full(inp.bounds.clone())).collect();
            let caps = inputs
                .iter()
                .zip(&regions)
                .map(|(inp, r)| max_capability(&inp.self_term, r).map(|c| c.value))
                .collect::<Result<Vec<_>>>()
                .map_err(&wrap)?;
            (regions, caps, (0, 0))
        };

        let mut controls = Vec::with_capacity(n);
        let mut relaxed = Vec::with_capacity(n);
        for i in 0..n {
            let out = safety_filter(&config.nominal[i], &regions[i], &barriers[i], &lies[i], &states[i])
                .map_err(|e| wrap(e))?;
            controls.push(out.control);
            relaxed.push(out.relaxed);
        }
        let violations = (0..n).map(|i| barriers[i].h(&states[i]).min(0.0)).collect();
        result.push_row(Row {
            time: t,
            states: states.clone(),
            controls: controls.clone(),
            capabilities,
            rounds,
            violations,
            relaxed,
        });
        if result.halted || k == steps {
            break;
        }
        states = rk4_step(model, &states, &controls, config.dt).map_err(&wrap)?;
        prev_controls = Some(controls);
    }
    Ok(result)
}

/// Open-loop baseline with every control held at zero.
pub fn run_uncontrolled<M: NetworkModel + ?Sized>(
    model: &M,
    barriers: &[BarrierSpec],
    x0: &[DVector<f64>],
    config: &SimConfig,
) -> Result<ScenarioResult> {
    let steps = check_inputs(model, barriers, x0, config)?;
    let graph = model.graph();
    let n = graph.node_count();
    let controls: Vec<DVector<f64>> = graph
        .nodes()
        .map(|i| graph.control_dim(i).map(DVector::zeros))
        .collect::<Result<_>>()?;
    let mut result = ScenarioResult::default();
    let mut states = x0.to_vec();
    for k in 0..=steps {
        let t = k as f64 * config.dt;
        result.push_row(Row {
            time: t,
            states: states.clone(),
            controls: controls.clone(),
            capabilities: vec![0.0; n],
            rounds: (0, 0),
            violations: (0..n).map(|i| barriers[i].h(&states[i]).min(0.0)).collect(),
            relaxed: vec![false; n],
        });
        if k < steps {
            states = rk4_step(model, &states, &controls, config.dt).map_err(at(t))?;
        }
    }
    Ok(result)
}
