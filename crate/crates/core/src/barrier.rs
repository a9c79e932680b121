//! Second-order barrier chain for a threshold constraint.
//!
//! With linear class-K gains `η_i`, `κ_i`:
//!
//! ```text
//! ψ⁰ = h
//! ψ¹ = ḣ + η h
//! ψ² = ḧ + η ḣ + κ (ḣ + η h)
//! ```
//!
//! `ψ²` is affine in the neighbor controls, so it splits into coupling
//! vectors `a_ij` (one per incoming neighbor) and a self term `c_i(u_i)`
//! that is quadratic in the node's own control.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{LieTable, NeighborhoodState};
use crate::error::{Error, Result};
use crate::geometry::{dykstra, ControlRegion, FEASIBILITY_TOL};
use crate::graph::NodeId;

/// How `u̇_i` is modelled inside `ψ²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UdotPolicy {
    #[default]
    Zero,
    /// `(u - u_prev) / dt`, falling back to zero without history.
    BackwardDifference,
}

/// Barrier `h_i(x_i) = threshold - x_i[0]` with its class-K gains.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSpec {
    pub threshold: f64,
    pub eta: f64,
    pub kappa: f64,
    pub udot: UdotPolicy,
}

impl BarrierSpec {
    pub fn new(threshold: f64, eta: f64, kappa: f64) -> Self {
        Self {
            threshold,
            eta,
            kappa,
            udot: UdotPolicy::Zero,
        }
    }

    pub fn with_udot(mut self, udot: UdotPolicy) -> Self {
        self.udot = udot;
        self
    }

    pub fn h(&self, x_i: &DVector<f64>) -> f64 {
        self.threshold - x_i[0]
    }
}

pub fn psi0(spec: &BarrierSpec, x_i: &DVector<f64>) -> f64 {
    spec.h(x_i)
}

fn check_control(lie: &LieTable, u_i: &DVector<f64>) -> Result<()> {
    if u_i.len() != lie.lg_h.len() {
        return Err(Error::dim("node control", lie.lg_h.len(), u_i.len()));
    }
    Ok(())
}

/// `ḣ = L_f h + L_g h · u`.
pub fn h_dot(lie: &LieTable, u_i: &DVector<f64>) -> Result<f64> {
    check_control(lie, u_i)?;
    Ok(lie.lf_h + lie.lg_h.dot(u_i))
}

pub fn psi1(spec: &BarrierSpec, lie: &LieTable, x_i: &DVector<f64>, u_i: &DVector<f64>) -> Result<f64> {
    Ok(h_dot(lie, u_i)? + spec.eta * spec.h(x_i))
}

/// `ψ¹` as an affine function of `u_i`, i.e. the halfspace `ψ¹ ≥ 0`.
pub fn psi1_halfspace(spec: &BarrierSpec, lie: &LieTable, x_i: &DVector<f64>) -> crate::geometry::Halfspace {
    crate::geometry::Halfspace::new(lie.lg_h.clone(), lie.lf_h + spec.eta * spec.h(x_i))
}

/// Control-rate model `d(u) = gain · u + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct UdotModel {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl UdotModel {
    pub fn zero(m: usize) -> Self {
        Self {
            gain: DMatrix::zeros(m, m),
            offset: DVector::zeros(m),
        }
    }

    pub fn from_policy(policy: UdotPolicy, u_prev: Option<&DVector<f64>>, dt: f64, m: usize) -> Self {
        match (policy, u_prev) {
            (UdotPolicy::Zero, _) => Self::zero(m),
            (UdotPolicy::BackwardDifference, None) => {
                log::debug!("no control history for backward difference, using zero rate");
                Self::zero(m)
            }
            (UdotPolicy::BackwardDifference, Some(prev)) => Self {
                gain: DMatrix::identity(m, m) / dt,
                offset: -prev / dt,
            },
        }
    }

    pub fn eval(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.gain * u + &self.offset
    }
}

/// Evaluates the chosen `u̇` policy at `u_now`.
pub fn udot_model(policy: UdotPolicy, u_now: &DVector<f64>, u_prev: Option<&DVector<f64>>, dt: f64) -> DVector<f64> {
    UdotModel::from_policy(policy, u_prev, dt, u_now.len()).eval(u_now)
}

/// `constant + linear · u + uᵀ quadratic u`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub constant: f64,
    pub linear: DVector<f64>,
    pub quadratic: DMatrix<f64>,
}

impl QuadraticForm {
    pub fn affine(constant: f64, linear: DVector<f64>) -> Self {
        let m = linear.len();
        Self {
            constant,
            linear,
            quadratic: DMatrix::zeros(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        self.constant + self.linear.dot(u) + u.dot(&(&self.quadratic * u))
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.linear + (&self.quadratic + self.quadratic.transpose()) * u
    }
}

/// `ψ² = Σ_j a_ij · u_j + c_i(u_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Psi2Decomposition {
    pub coupling: BTreeMap<NodeId, DVector<f64>>,
    pub self_term: QuadraticForm,
}

impl Psi2Decomposition {
    pub fn eval(&self, u_i: &DVector<f64>, u_nbrs: &BTreeMap<NodeId, DVector<f64>>) -> Result<f64> {
        let mut total = self.self_term.eval(u_i);
        for (j, a) in &self.coupling {
            let u_j = u_nbrs
                .get(j)
                .ok_or_else(|| Error::ProtocolState(format!("missing control of neighbor {j}")))?;
            total += a.dot(u_j);
        }
        Ok(total)
    }
}

fn check_keys(lie: &LieTable, nbr: &NeighborhoodState) -> Result<()> {
    for j in nbr.one_hop.keys() {
        if !lie.lgj_lfi_h.contains_key(j) || !lie.lfj_lfi_h.contains_key(j) {
            return Err(Error::ProtocolState(format!(
                "Lie table of node {} has no entry for neighbor {j}",
                nbr.node
            )));
        }
    }
    if lie.lgj_lfi_h.len() != nbr.one_hop.len() || lie.lfj_lfi_h.len() != nbr.one_hop.len() {
        return Err(Error::ProtocolState(format!(
            "Lie table of node {} is keyed by nodes outside its neighborhood",
            nbr.node
        )));
    }
    Ok(())
}

/// Splits `ψ²` into neighbor coupling and the node's own capability term.
pub fn decompose_psi2(
    spec: &BarrierSpec,
    lie: &LieTable,
    nbr: &NeighborhoodState,
    udot: &UdotModel,
) -> Result<Psi2Decomposition> {
    check_keys(lie, nbr)?;
    let m = lie.lg_h.len();
    if udot.offset.len() != m {
        return Err(Error::dim("control rate model", m, udot.offset.len()));
    }
    let h = spec.h(&nbr.self_state);
    let (eta, kappa) = (spec.eta, spec.kappa);

    let constant = lie.lfj_lfi_h.values().sum::<f64>()
        + lie.lf2_h
        + lie.lg_h.dot(&udot.offset)
        + (eta + kappa) * lie.lf_h
        + kappa * eta * h;
    let linear = &lie.lfi_lgi_h
        + &lie.lgi_lfi_h
        + udot.gain.transpose() * &lie.lg_h
        + &lie.lg_h * (eta + kappa);
    Ok(Psi2Decomposition {
        coupling: lie.lgj_lfi_h.clone(),
        self_term: QuadraticForm {
            constant,
            linear,
            quadratic: lie.lg2_h.clone(),
        },
    })
}

/// Second derivative of `h` along the network dynamics.
pub fn h_ddot(
    lie: &LieTable,
    u_i: &DVector<f64>,
    u_nbrs: &BTreeMap<NodeId, DVector<f64>>,
    udot_i: &DVector<f64>,
) -> Result<f64> {
    check_control(lie, u_i)?;
    let mut total = 0.0;
    for (j, lfj) in &lie.lfj_lfi_h {
        let u_j = u_nbrs
            .get(j)
            .ok_or_else(|| Error::ProtocolState(format!("missing control of neighbor {j}")))?;
        let a = &lie.lgj_lfi_h[j];
        if a.len() != u_j.len() {
            return Err(Error::dim("neighbor control", a.len(), u_j.len()));
        }
        total += lfj + a.dot(u_j);
    }
    total += lie.lf2_h;
    total += u_i.dot(&(&lie.lg2_h * u_i));
    total += lie.lg_h.dot(udot_i);
    total += (&lie.lfi_lgi_h + &lie.lgi_lfi_h).dot(u_i);
    Ok(total)
}

/// `ψ²` evaluated term by term, without the decomposition.
pub fn psi2(
    spec: &BarrierSpec,
    lie: &LieTable,
    x_i: &DVector<f64>,
    u_i: &DVector<f64>,
    u_nbrs: &BTreeMap<NodeId, DVector<f64>>,
    udot_i: &DVector<f64>,
) -> Result<f64> {
    let hd = h_dot(lie, u_i)?;
    let h = spec.h(x_i);
    Ok(h_ddot(lie, u_i, u_nbrs, udot_i)? + spec.eta * hd + spec.kappa * (hd + spec.eta * h))
}

/// Maximum of a node's capability term over its region.
#[derive(Debug, Clone, PartialEq)]
pub struct Capability {
    pub value: f64,
    pub argmax: DVector<f64>,
}

const ASCENT_TOL: f64 = 1e-10;
const ASCENT_ITERS: usize = 1000;
/// Vertex restarts are skipped above this control dimension.
const MAX_RESTART_DIM: usize = 10;

/// Maximizes `a t² + b t` over `[lo, hi]` (with `lo ≤ hi` finite).
fn maximize_1d(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    let q = |t: f64| a * t * t + b * t;
    let mut best = if q(hi) > q(lo) { hi } else { lo };
    if a < 0.0 {
        let t = (-b / (2.0 * a)).clamp(lo, hi);
        if q(t) > q(best) {
            best = t;
        }
    }
    best
}

/// Maximizes `form` over `region`.
///
/// Exact in one dimension. In higher dimensions this is coordinate ascent
/// with exact line search along the feasible segment of each coordinate,
/// started from the projected box center and every projected box vertex.
pub fn max_capability(form: &QuadraticForm, region: &ControlRegion) -> Result<Capability> {
    if form.dim() != region.dim() {
        return Err(Error::dim("capability form", region.dim(), form.dim()));
    }
    if let Some(p) = region.frozen_point() {
        return Ok(Capability {
            value: form.eval(p),
            argmax: p.clone(),
        });
    }
    if region.dim() == 1 {
        let (lo, hi) = region.interval().ok_or(Error::EmptyRegion)?;
        let a = form.quadratic[(0, 0)];
        let b = form.linear[0];
        // Shift to the interval's lower end to keep the arithmetic centred.
        let t = maximize_1d(a, b + 2.0 * a * lo, 0.0, hi - lo);
        let u = DVector::from_element(1, lo + t);
        return Ok(Capability {
            value: form.eval(&u),
            argmax: u,
        });
    }
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }

    let bounds = region.bounds();
    let mut starts = vec![bounds.center()];
    if region.dim() <= MAX_RESTART_DIM {
        starts.extend(bounds.vertices());
    }
    let sym = (&form.quadratic + form.quadratic.transpose()) * 0.5;
    let mut best: Option<Capability> = None;
    for start in starts {
        let u0 = match dykstra(&start, Some(bounds), region.requests()) {
            Ok(u) => bounds.project(&u),
            Err(_) => continue,
        };
        let u = coordinate_ascent(form, &sym, region, u0);
        let value = form.eval(&u);
        if best.as_ref().map_or(true, |b| value > b.value) {
            best = Some(Capability { value, argmax: u });
        }
    }
    best.ok_or(Error::EmptyRegion)
}

fn coordinate_ascent(
    form: &QuadraticForm,
    sym: &DMatrix<f64>,
    region: &ControlRegion,
    mut u: DVector<f64>,
) -> DVector<f64> {
    let bounds = region.bounds();
    let mut value = form.eval(&u);
    for _ in 0..ASCENT_ITERS {
        let before = value;
        for k in 0..u.len() {
            let mut lo = bounds.lower()[k] - u[k];
            let mut hi = bounds.upper()[k] - u[k];
            for h in region.requests() {
                let a = h.normal[k];
                let slack = h.value(&u);
                if a > 0.0 {
                    lo = lo.max(-slack / a);
                } else if a < 0.0 {
                    hi = hi.min(-slack / a);
                }
            }
            if lo > hi {
                // Started marginally outside a halfspace; stay put.
                continue;
            }
            let grad_k = form.linear[k] + 2.0 * (sym * &u)[k];
            let t = maximize_1d(sym[(k, k)], grad_k, lo.min(0.0), hi.max(0.0));
            u[k] += t;
        }
        u = bounds.project(&u);
        value = form.eval(&u);
        if value - before <= ASCENT_TOL * (1.0 + before.abs()) {
            break;
        }
    }
    debug_assert!(region.contains(&u, FEASIBILITY_TOL.sqrt()));
    u
}
