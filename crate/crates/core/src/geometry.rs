//! Control regions built from a box and request halfspaces.
//!
//! One-dimensional regions are handled with exact interval arithmetic.
//! Higher-dimensional questions (projection, emptiness, closest points) go
//! through Dykstra's alternating projection, where every individual
//! projection is closed form.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Slack allowed when testing membership.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Box-to-polytope distance below which the two sets count as intersecting.
pub const DISTANCE_TOL: f64 = 1e-9;

const MAX_SWEEPS: usize = 100_000;
const DYKSTRA_SWEEPS: usize = 10_000;
const STEP_TOL: f64 = 1e-13;

/// `{u : normal · u + offset ≥ 0}`. A zero normal makes the halfspace
/// trivial: everything when `offset ≥ 0`, nothing otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: DVector<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    pub fn scalar(normal: f64, offset: f64) -> Self {
        Self::new(DVector::from_element(1, normal), offset)
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        self.normal.dot(u) + self.offset
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.value(u) >= -tol
    }

    pub fn is_trivial(&self) -> bool {
        self.normal.iter().all(|&v| v == 0.0)
    }

    /// Euclidean projection, `None` for the trivially empty halfspace.
    pub fn project(&self, u: &DVector<f64>) -> Option<DVector<f64>> {
        let v = self.value(u);
        if v >= 0.0 {
            return Some(u.clone());
        }
        let norm2 = self.normal.norm_squared();
        if norm2 == 0.0 {
            return None;
        }
        Some(u - &self.normal * (v / norm2))
    }
}

/// Axis-aligned box `U_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    /// # Panics
    /// If the bounds differ in length or some `lower > upper`.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len(), "box bounds differ in length");
        assert!(
            lower.iter().zip(&upper).all(|(l, u)| l <= u),
            "box lower bound exceeds upper bound"
        );
        Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        }
    }

    pub fn interval(lower: f64, upper: f64) -> Self {
        Self::new(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }

    /// All `2^M` corners, in binary-counting order.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let m = self.dim();
        (0..1usize << m)
            .map(|mask| {
                DVector::from_fn(m, |k, _| {
                    if mask >> k & 1 == 1 {
                        self.upper[k]
                    } else {
                        self.lower[k]
                    }
                })
            })
            .collect()
    }
}

/// A node's admissible controls: the box intersected with every request
/// halfspace, or a single compromise point once frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRegion {
    bounds: BoxSet,
    requests: Vec<Halfspace>,
    frozen: Option<DVector<f64>>,
}

impl ControlRegion {
    pub fn full(bounds: BoxSet) -> Self {
        Self {
            bounds,
            requests: Vec::new(),
            frozen: None,
        }
    }

    /// Region collapsed to `point`, which is clamped into the box.
    pub fn frozen(bounds: BoxSet, requests: Vec<Halfspace>, point: DVector<f64>) -> Self {
        let point = bounds.project(&point);
        Self {
            bounds,
            requests,
            frozen: Some(point),
        }
    }

    pub fn bounds(&self) -> &BoxSet {
        &self.bounds
    }

    pub fn requests(&self) -> &[Halfspace] {
        &self.requests
    }

    pub fn frozen_point(&self) -> Option<&DVector<f64>> {
        self.frozen.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        match &self.frozen {
            Some(p) => u.len() == p.len() && (u - p).norm() <= tol,
            None => self.bounds.contains(u, tol) && self.requests.iter().all(|h| h.contains(u, tol)),
        }
    }

    /// Adds one more halfspace. A frozen region stays frozen.
    pub fn with_halfspace(&self, h: Halfspace) -> Result<Self> {
        if h.dim() != self.dim() {
            return Err(Error::dim("halfspace normal", self.dim(), h.dim()));
        }
        let mut out = self.clone();
        out.requests.push(h);
        Ok(out)
    }

    /// Exact feasible interval of a one-dimensional region.
    ///
    /// Returns `None` when empty. Intersections that miss by no more than a
    /// relative `FEASIBILITY_TOL` collapse to a single point instead.
    pub fn interval(&self) -> Option<(f64, f64)> {
        debug_assert_eq!(self.dim(), 1);
        if let Some(p) = &self.frozen {
            return Some((p[0], p[0]));
        }
        let (plo, phi) = polytope_interval(&self.requests)?;
        let (blo, bhi) = (self.bounds.lower[0], self.bounds.upper[0]);
        let lo = blo.max(plo);
        let hi = bhi.min(phi);
        if lo <= hi {
            Some((lo, hi))
        } else if lo - hi <= FEASIBILITY_TOL * hi.abs().max(lo.abs()).max(1.0) {
            let p = (0.5 * (lo + hi)).clamp(blo, bhi);
            Some((p, p))
        } else {
            None
        }
    }

    pub fn is_empty(&self) -> bool {
        is_empty(self)
    }

    /// Euclidean projection of `u` onto the region.
    pub fn project(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.dim() {
            return Err(Error::dim("control", self.dim(), u.len()));
        }
        if let Some(p) = &self.frozen {
            return Ok(p.clone());
        }
        if self.dim() == 1 {
            let (lo, hi) = self.interval().ok_or(Error::EmptyRegion)?;
            return Ok(DVector::from_element(1, u[0].clamp(lo, hi)));
        }
        if self.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let p = dykstra(u, Some(&self.bounds), &self.requests)?;
        Ok(self.bounds.project(&p))
    }
}

/// Box intersected with request halfspaces.
pub fn intersect(bounds: &BoxSet, halfspaces: Vec<Halfspace>) -> Result<ControlRegion> {
    if let Some(h) = halfspaces.iter().find(|h| h.dim() != bounds.dim()) {
        return Err(Error::dim("halfspace normal", bounds.dim(), h.dim()));
    }
    Ok(ControlRegion {
        bounds: bounds.clone(),
        requests: halfspaces,
        frozen: None,
    })
}

/// Exact for one-dimensional regions; otherwise decided by the box-to-polytope
/// distance. A polytope that is itself empty, or on which the projection
/// fails to converge, counts as empty.
pub fn is_empty(region: &ControlRegion) -> bool {
    if region.frozen.is_some() {
        return false;
    }
    if region.dim() == 1 {
        return region.interval().is_none();
    }
    match closest_point(&region.bounds, &region.requests) {
        Ok(cp) => cp.distance > 0.0,
        Err(e) => {
            log::debug!("treating region as empty: {e}");
            true
        }
    }
}

/// Interval `{u ∈ ℝ : every halfspace holds}`; `None` when empty.
fn polytope_interval(halfspaces: &[Halfspace]) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for h in halfspaces {
        let a = h.normal[0];
        if a > 0.0 {
            lo = lo.max(-h.offset / a);
        } else if a < 0.0 {
            hi = hi.min(-h.offset / a);
        } else if h.offset < 0.0 {
            return None;
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Nearest pair between the box and the request polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosestPoint {
    /// Point of the box.
    pub point: DVector<f64>,
    /// Its projection onto the polytope.
    pub partner: DVector<f64>,
    pub distance: f64,
    pub sweeps: usize,
}

/// Point of `bounds` closest to the polytope `∩ halfspaces`.
///
/// Alternates box clamping with Dykstra projection onto the polytope,
/// starting from the box center. The polytope must be nonempty.
pub fn closest_point(bounds: &BoxSet, polytope: &[Halfspace]) -> Result<ClosestPoint> {
    if let Some(h) = polytope.iter().find(|h| h.dim() != bounds.dim()) {
        return Err(Error::dim("halfspace normal", bounds.dim(), h.dim()));
    }
    if polytope.iter().any(|h| h.is_trivial() && h.offset < 0.0) {
        return Err(Error::EmptyPolytope);
    }
    let active: Vec<Halfspace> = polytope.iter().filter(|h| !h.is_trivial()).cloned().collect();

    if bounds.dim() == 1 {
        let (plo, phi) = polytope_interval(&active).ok_or(Error::EmptyPolytope)?;
        let (blo, bhi) = (bounds.lower[0], bounds.upper[0]);
        let (u, v) = if bhi < plo {
            (bhi, plo)
        } else if blo > phi {
            (blo, phi)
        } else {
            let c = (0.5 * (blo + bhi)).clamp(blo.max(plo), bhi.min(phi));
            (c, c)
        };
        return Ok(ClosestPoint {
            point: DVector::from_element(1, u),
            partner: DVector::from_element(1, v),
            distance: (u - v).abs(),
            sweeps: 0,
        });
    }

    let mut u = bounds.center();
    for sweep in 1..=MAX_SWEEPS {
        let v = dykstra(&u, None, &active)?;
        let next = bounds.project(&v);
        let step = (&next - &u).norm();
        u = next;
        if step <= STEP_TOL * (1.0 + u.norm()) {
            let partner = dykstra(&u, None, &active)?;
            // Distances inside the intersection tolerance are reported as
            // zero so that `is_empty` and this function always agree.
            let gap = (&u - &partner).norm();
            let distance = if gap <= DISTANCE_TOL { 0.0 } else { gap };
            return Ok(ClosestPoint {
                point: u,
                partner,
                distance,
                sweeps: sweep,
            });
        }
    }
    let v = dykstra(&u, None, &active)?;
    Err(Error::GeometryConvergence {
        sweeps: MAX_SWEEPS,
        residual: (&u - &v).norm(),
        last_iterate: u,
    })
}

/// Dykstra projection of `point` onto `bounds ∩ halfspaces`.
pub fn dykstra(
    point: &DVector<f64>,
    bounds: Option<&BoxSet>,
    halfspaces: &[Halfspace],
) -> Result<DVector<f64>> {
    let mut x = point.clone();
    if halfspaces.is_empty() {
        return Ok(bounds.map_or(x, |b| b.project(point)));
    }
    if bounds.is_none() && halfspaces.len() == 1 {
        return halfspaces[0].project(point).ok_or(Error::EmptyPolytope);
    }
    let sets = halfspaces.len() + usize::from(bounds.is_some());
    let mut increments = vec![DVector::zeros(point.len()); sets];
    for _ in 0..DYKSTRA_SWEEPS {
        let start = x.clone();
        for (s, inc) in increments.iter_mut().enumerate() {
            let shifted = &x + &*inc;
            let y = match (bounds, s) {
                (Some(b), 0) => b.project(&shifted),
                (Some(_), s) => halfspaces[s - 1].project(&shifted).ok_or(Error::EmptyPolytope)?,
                (None, s) => halfspaces[s].project(&shifted).ok_or(Error::EmptyPolytope)?,
            };
            *inc = shifted - &y;
            x = y;
        }
        let feasible = halfspaces.iter().all(|h| h.contains(&x, 1e-12))
            && bounds.map_or(true, |b| b.contains(&x, 1e-12));
        if feasible && (&x - &start).norm() <= STEP_TOL * (1.0 + x.norm()) {
            return Ok(x);
        }
    }
    let residual = halfspaces
        .iter()
        .map(|h| (-h.value(&x)).max(0.0))
        .fold(0.0, f64::max);
    Err(Error::GeometryConvergence {
        sweeps: DYKSTRA_SWEEPS,
        residual,
        last_iterate: x,
    })
}

/// Outcome of the weak non-interference test.
#[derive(Debug, Clone, PartialEq)]
pub struct NonInterference {
    pub holds: bool,
    /// Unit direction `a` with `a · a_k > 0` for every normal, when one exists.
    pub witness: Option<DVector<f64>>,
    pub diagnostic: Option<String>,
}

impl NonInterference {
    fn fails(reason: impl Into<String>) -> Self {
        Self {
            holds: false,
            witness: None,
            diagnostic: Some(reason.into()),
        }
    }
}

/// Decides whether every normal lies strictly inside one common open
/// halfspace.
///
/// In several dimensions the witness is the minimum-norm point of the convex
/// hull of the normalized normals, found as the (rescaled) Dykstra projection
/// of the origin onto `{a : â_k · a ≥ 1 ∀k}`. That set is empty exactly when
/// the hull contains the origin.
pub fn weakly_non_interfering(normals: &[DVector<f64>]) -> NonInterference {
    let Some(first) = normals.first() else {
        return NonInterference {
            holds: true,
            witness: None,
            diagnostic: None,
        };
    };
    let m = first.len();
    if normals.iter().any(|a| a.len() != m) {
        return NonInterference::fails("normals differ in dimension");
    }
    if let Some(k) = normals.iter().position(|a| a.iter().all(|&v| v == 0.0)) {
        return NonInterference::fails(format!("normal {k} is zero"));
    }
    if m == 1 {
        let sign = first[0].signum();
        return if normals.iter().all(|a| a[0].signum() == sign) {
            NonInterference {
                holds: true,
                witness: Some(DVector::from_element(1, sign)),
                diagnostic: None,
            }
        } else {
            NonInterference::fails("normals have opposite signs")
        };
    }
    let constraints: Vec<Halfspace> = normals
        .iter()
        .map(|a| Halfspace::new(a.normalize(), -1.0))
        .collect();
    match dykstra(&DVector::zeros(m), None, &constraints) {
        Ok(a) if constraints.iter().all(|h| h.normal.dot(&a) > 0.0) => NonInterference {
            holds: true,
            witness: Some(a.normalize()),
            diagnostic: None,
        },
        Ok(_) => NonInterference::fails("projection did not separate the normals"),
        Err(_) => NonInterference::fails("origin lies in the convex hull of the normals"),
    }
}
