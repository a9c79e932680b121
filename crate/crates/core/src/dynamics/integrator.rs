use nalgebra::DVector;

use super::{NeighborhoodState, NetworkModel};
use crate::error::{Error, Result};

/// Largest post-step state correction tolerated without a warning.
const CLAMP_WARN: f64 = 1e-9;

/// One classical Runge-Kutta step of `ẋ = rhs(x)`.
pub fn rk4<F>(x: &DVector<f64>, dt: f64, mut rhs: F) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = rhs(x)?;
    let k2 = rhs(&(x + &k1 * (dt / 2.0)))?;
    let k3 = rhs(&(x + &k2 * (dt / 2.0)))?;
    let k4 = rhs(&(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Stacked closed-loop vector field with controls held fixed.
pub fn vector_field<M: NetworkModel + ?Sized>(
    model: &M,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let graph = model.graph();
    if controls.len() != graph.node_count() {
        return Err(Error::dim("network control", graph.node_count(), controls.len()));
    }
    graph
        .nodes()
        .map(|i| {
            let nbr = NeighborhoodState::one_hop(graph, states, i)?;
            let g = model.control_matrix(i, &states[i])?;
            if g.ncols() != controls[i].len() {
                return Err(Error::dim("node control", g.ncols(), controls[i].len()));
            }
            let dx = model.drift(i, &nbr)? + g * &controls[i];
            if dx.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics { node: i });
            }
            Ok(dx)
        })
        .collect()
}

fn split(graph_dims: &[usize], flat: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut offset = 0;
    graph_dims
        .iter()
        .map(|&d| {
            let block = flat.rows(offset, d).into_owned();
            offset += d;
            block
        })
        .collect()
}

fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        blocks.iter().map(|b| b.len()).sum(),
        blocks.iter().flat_map(|b| b.iter().copied()),
    )
}

/// One RK4 step of the whole network under zero-order-hold controls,
/// followed by the model's state projection.
pub fn rk4_step<M: NetworkModel + ?Sized>(
    model: &M,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    if !(dt > 0.0) {
        return Err(Error::ProtocolState(format!("integration step must be positive, got {dt}")));
    }
    let dims: Vec<usize> = states.iter().map(|x| x.len()).collect();
    let flat = rk4(&stack(states), dt, |x| {
        let blocks = split(&dims, x);
        Ok(stack(&vector_field(model, &blocks, controls)?))
    })?;
    let mut next = split(&dims, &flat);
    let clamped = model.project_state(&mut next);
    if clamped > CLAMP_WARN {
        log::warn!("state projection moved a coordinate by {clamped:.3e}");
    }
    Ok(next)
}
