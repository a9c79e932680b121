//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use ccbf_cli::config::ScenarioConfig;
use ccbf_cli::run::{load_scenario, run_to_dir, simulate, MESSAGES_FILE, RESULT_FILE};
use ccbf_core::barrier::{decompose_psi2, psi1, psi2, BarrierSpec, QuadraticForm, UdotModel, UdotPolicy};
use ccbf_core::collab::{
    collaborative_safety, Collaboration, MessageKind, NodeInput, ProtocolConfig, ProtocolStatus,
};
use ccbf_core::dynamics::{LieForms, NeighborhoodState, NetworkModel, SisModel, SisParams};
use ccbf_core::geometry::{closest_point, intersect, BoxSet, Halfspace};
use ccbf_core::simulate::{run_uncontrolled, ScenarioResult, SimConfig};
use ccbf_core::{Error, NetworkGraph};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scalar_states(xs: &[f64]) -> Vec<DVector<f64>> {
    xs.iter().map(|&v| DVector::from_element(1, v)).collect()
}

fn three_node_model() -> SisModel {
    let g = NetworkGraph::complete(3);
    let p = SisParams::homogeneous(&g, 0.5, 0.25, 0.3, 0.75);
    SisModel::new(g, p, LieForms::Exact).unwrap()
}

fn bundled_config() -> ScenarioConfig {
    let mut config = load_scenario("paper_sis3").expect("bundled scenario loads");
    config.sim.trace = true;
    config
}

/// Symmetric start converges to the endemic equilibrium 0.7.
fn endemic() -> Verdict {
    let started = Instant::now();
    let model = three_node_model();
    let barriers = vec![BarrierSpec::new(1.0, 1.0, 1.0); 3];
    let out = run_uncontrolled(&model, &barriers, &scalar_states(&[0.02; 3]), &SimConfig::new(3))
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let last: Vec<f64> = out.states.last().unwrap().iter().map(|x| x[0]).collect();
    let ok = last.iter().all(|x| (x - 0.7).abs() <= 1e-3) && elapsed < Duration::from_secs(1);
    check(ok, format!("x(100) = {last:.6?} in {:.3} s", elapsed.as_secs_f64()))
}

/// Bundled scenario with collaboration: safe, node 1 saturates, node 3 waits
/// for node 1's request.
fn bundled_safety() -> (Verdict, Option<ScenarioResult>) {
    let started = Instant::now();
    let result = match simulate(&bundled_config()) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), None),
    };
    let elapsed = started.elapsed();
    let worst = result.worst_violation();
    let safe = !result.halted && worst.iter().all(|&w| w >= -1e-3);
    let u = |i: usize| result.controls.iter().map(|row| row[i][0]).collect::<Vec<f64>>();
    let u1_max = u(0).into_iter().fold(0.0, f64::max);
    let saturates = u1_max >= 0.75 - 1e-12;
    let first_u3 = u(2).iter().position(|&v| v > 0.0).map(|k| result.times[k]);
    let first_request = result
        .messages
        .iter()
        .find(|m| m.message.kind == MessageKind::Request && m.message.from == 0 && m.message.to == 2 && m.message.value < 0.0)
        .map(|m| m.time);
    let waits = matches!((first_u3, first_request), (Some(a), Some(b)) if a > 0.0 && a >= b);
    let ok = safe && saturates && waits && elapsed < Duration::from_secs(30);
    let detail = format!(
        "min h = {worst:.3?}, max u1 = {u1_max}, u3 first positive at t = {first_u3:?}, \
         first request 1->3 at t = {first_request:?}, {:.2} s",
        elapsed.as_secs_f64()
    );
    (check(ok, detail), Some(result))
}

fn no_collab() -> (Verdict, Option<ScenarioResult>) {
    let mut config = bundled_config();
    config.sim.collaboration = false;
    match simulate(&config) {
        Ok(result) => {
            let worst = result.worst_violation();
            (check(worst[0] < 0.0, format!("min h = {worst:.3?}")), Some(result))
        }
        Err(e) => (Err(e.to_string()), None),
    }
}

/// Random scalar-control network: positive couplings, so all requests on a
/// node share a direction.
fn random_instance(rng: &mut ChaCha8Rng) -> (NetworkGraph, Vec<NodeInput>) {
    let n = rng.gen_range(2..=6);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.gen_bool(0.5) {
                edges.push((a, b));
            }
        }
    }
    let graph = NetworkGraph::scalar(n, edges).unwrap();
    let inputs = (0..n)
        .map(|i| {
            let lo = rng.gen_range(-1.0..0.5);
            let hi = lo + rng.gen_range(0.1..2.0);
            let coupling = graph
                .in_neighbors(i)
                .unwrap()
                .iter()
                .map(|&j| (j, DVector::from_element(1, rng.gen_range(0.01..1.0))))
                .collect();
            NodeInput {
                coupling,
                self_term: QuadraticForm {
                    constant: rng.gen_range(-0.6..0.4),
                    linear: DVector::from_element(1, rng.gen_range(-0.5..0.5)),
                    quadratic: DMatrix::from_element(1, 1, -rng.gen_range(0.0..0.5)),
                },
                bounds: BoxSet::interval(lo, hi),
            }
        })
        .collect();
    (graph, inputs)
}

fn protocol_convergence(residual: &mut f64) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = BTreeMap::new();
    for case in 0..200 {
        let (graph, inputs) = random_instance(&mut rng);
        let out = Collaboration::new(&graph, &inputs, ProtocolConfig::default())
            .and_then(|c| c.run())
            .map_err(|e| format!("instance {case}: {e}"))?;
        *residual = residual.max(out.max_conservation_residual);
        let label = match out.status {
            ProtocolStatus::Converged => "converged",
            ProtocolStatus::CapReached(_) => "cap reached",
            ProtocolStatus::TerminallyInfeasible(_) => "terminally infeasible",
        };
        *counts.entry(label).or_insert(0) += 1;
        if matches!(out.status, ProtocolStatus::TerminallyInfeasible(_)) {
            if collaborative_safety(&graph, &inputs, ProtocolConfig::default()).is_ok() {
                return Err(format!("instance {case}: infeasibility not raised as an error"));
            }
            continue;
        }
        for (i, ledger) in out.ledgers.iter().enumerate() {
            let (lo, hi) = ledger
                .region
                .interval()
                .ok_or_else(|| format!("instance {case}: node {i} region empty"))?;
            for s in 0..=50 {
                let u = DVector::from_element(1, lo + (hi - lo) * s as f64 / 50.0);
                for &k in graph.out_neighbors(i).unwrap() {
                    let slack = inputs[k].coupling[&i].dot(&u) + ledger.in_req[&k];
                    if slack < -1e-9 {
                        return Err(format!("instance {case}: node {i} violates request of {k} by {slack:e}"));
                    }
                }
            }
        }
    }

    // No node can move and every node needs help.
    let graph = NetworkGraph::complete(3);
    let stuck: Vec<NodeInput> = (0..3)
        .map(|i| NodeInput {
            coupling: graph
                .in_neighbors(i)
                .unwrap()
                .iter()
                .map(|&j| (j, DVector::from_element(1, 0.05)))
                .collect(),
            self_term: QuadraticForm::affine(-0.2, DVector::from_element(1, 0.1)),
            bounds: BoxSet::interval(0.0, 0.0),
        })
        .collect();
    let raised = matches!(
        collaborative_safety(&graph, &stuck, ProtocolConfig::default()),
        Err(Error::TerminallyInfeasible { .. })
    );
    check(raised, format!("200 instances within caps: {counts:?}; constructed infeasible instance raised: {raised}"))
}

/// Chain-rule oracle for ψ² on the bundled three-node network.
fn oracle_psi2(beta: &DMatrix<f64>, gamma: f64, spec: &BarrierSpec, x: &[f64], u: &[f64], udot_i: f64, i: usize) -> f64 {
    let pressure = |x: &[f64], k: usize| (0..3).map(|j| beta[(k, j)] * x[j]).sum::<f64>();
    let xdot: Vec<f64> = (0..3).map(|k| -(gamma + u[k]) * x[k] + (1.0 - x[k]) * pressure(x, k)).collect();
    let ds: f64 = (0..3).map(|j| beta[(i, j)] * xdot[j]).sum();
    let xddot = -udot_i * x[i] - (gamma + u[i]) * xdot[i] - xdot[i] * pressure(x, i) + (1.0 - x[i]) * ds;
    let (h, hd, hdd) = (spec.threshold - x[i], -xdot[i], -xddot);
    hdd + spec.eta * hd + spec.kappa * (hd + spec.eta * h)
}

fn neighbor_controls(graph: &NetworkGraph, u: &[f64], i: usize) -> BTreeMap<usize, DVector<f64>> {
    graph.in_neighbors(i).unwrap().iter().map(|&j| (j, DVector::from_element(1, u[j]))).collect()
}

fn decomposition_identity() -> Verdict {
    let model = three_node_model();
    let beta = model.params().beta.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..=0.75)).collect();
        let i = rng.gen_range(0..3);
        let policy = if rng.gen_bool(0.5) { UdotPolicy::Zero } else { UdotPolicy::BackwardDifference };
        let spec = BarrierSpec::new(rng.gen_range(0.05..0.3), rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0)).with_udot(policy);
        let u_prev = DVector::from_element(1, rng.gen_range(0.0..=0.75));
        let udot = UdotModel::from_policy(policy, Some(&u_prev), 0.01, 1);
        let ui = DVector::from_element(1, u[i]);
        let sx = scalar_states(&x);
        let nbr = NeighborhoodState::snapshot(model.graph(), &sx, i).unwrap();
        let lie = model.lie_table(i, &nbr, &spec).unwrap();
        let d = decompose_psi2(&spec, &lie, &nbr, &udot).unwrap();
        let got = d.eval(&ui, &neighbor_controls(model.graph(), &u, i)).unwrap();
        let want = oracle_psi2(&beta, 0.3, &spec, &x, &u, udot.eval(&ui)[0], i);
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-12, format!("max |Σ a_ij u_j + c_i(u_i) - ψ²| = {worst:.3e} over 1000 samples"))
}

fn lie_consistency() -> Verdict {
    let model = three_node_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = 1e-5;
    let (mut worst_lf, mut worst_psi): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..0.99)).collect();
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..=0.75)).collect();
        let i = rng.gen_range(0..3);
        let spec = BarrierSpec::new(rng.gen_range(0.05..0.3), rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0));
        let field = |u: &[f64]| -> Vec<f64> {
            let g = model.graph();
            let sx = scalar_states(&x);
            (0..3)
                .map(|k| {
                    let nbr = NeighborhoodState::one_hop(g, &sx, k).unwrap();
                    model.drift(k, &nbr).unwrap()[0] - u[k] * x[k]
                })
                .collect()
        };
        let lie_at = |xs: &[f64]| {
            let sx = scalar_states(xs);
            let nbr = NeighborhoodState::snapshot(model.graph(), &sx, i).unwrap();
            model.lie_table(i, &nbr, &spec).unwrap()
        };
        let shift = |dir: &[f64], s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, b)| a + s * b).collect() };

        let f = field(&[0.0; 3]);
        let h = |s: f64| spec.threshold - shift(&f, s)[i];
        let fd = (h(eps) - h(-eps)) / (2.0 * eps);
        worst_lf = worst_lf.max((fd - lie_at(&x).lf_h).abs());

        let closed = field(&u);
        let ui = DVector::from_element(1, u[i]);
        let psi1_at = |s: f64| {
            let xs = shift(&closed, s);
            psi1(&spec, &lie_at(&xs), &DVector::from_element(1, xs[i]), &ui).unwrap()
        };
        let fd = (psi1_at(eps) - psi1_at(-eps)) / (2.0 * eps);
        let lie = lie_at(&x);
        let xi = DVector::from_element(1, x[i]);
        let rate = psi2(&spec, &lie, &xi, &ui, &neighbor_controls(model.graph(), &u, i), &DVector::zeros(1)).unwrap()
            - spec.kappa * psi1(&spec, &lie, &xi, &ui).unwrap();
        worst_psi = worst_psi.max((fd - rate).abs());
    }
    check(
        worst_lf <= 1e-6 && worst_psi <= 1e-6,
        format!("max FD error: L_f h {worst_lf:.3e}, dψ¹/dt {worst_psi:.3e} over 1000 states"),
    )
}

/// Exact distance from a point to a polytope of at most three planar
/// halfspaces: zero inside, else the nearest feasible face projection or
/// vertex.
fn distance_to_polytope(p: &DVector<f64>, poly: &[Halfspace]) -> f64 {
    let inside = |q: &DVector<f64>| poly.iter().all(|h| h.value(q) >= -1e-12);
    if inside(p) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for h in poly {
        let q = h.project(p).unwrap();
        if inside(&q) {
            best = best.min((p - &q).norm());
        }
    }
    for (k, a) in poly.iter().enumerate() {
        for b in &poly[k + 1..] {
            let det = a.normal[0] * b.normal[1] - a.normal[1] * b.normal[0];
            if det.abs() < 1e-12 {
                continue;
            }
            let v = DVector::from_row_slice(&[
                (-a.offset * b.normal[1] + b.offset * a.normal[1]) / det,
                (-b.offset * a.normal[0] + a.offset * b.normal[0]) / det,
            ]);
            if inside(&v) {
                best = best.min((p - v).norm());
            }
        }
    }
    best
}

fn geometry_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut disagreements = 0;
    for _ in 0..100 {
        let lo: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..0.5)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.2..1.5)).collect();
        let b = BoxSet::new(lo.clone(), hi.clone());
        let base = rng.gen_range(0.0..std::f64::consts::TAU);
        let poly: Vec<Halfspace> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let angle = base + rng.gen_range(-1.2..1.2);
                Halfspace::new(DVector::from_row_slice(&[angle.cos(), angle.sin()]), rng.gen_range(-2.0..1.0))
            })
            .collect();
        let cp = closest_point(&b, &poly).map_err(|e| e.to_string())?;
        let mut grid = f64::INFINITY;
        for a in 0..=200 {
            for c in 0..=200 {
                let p = DVector::from_row_slice(&[
                    lo[0] + (hi[0] - lo[0]) * a as f64 / 200.0,
                    lo[1] + (hi[1] - lo[1]) * c as f64 / 200.0,
                ]);
                grid = grid.min(distance_to_polytope(&p, &poly));
            }
        }
        worst = worst.max((cp.distance - grid).abs());
        let empty = intersect(&b, poly).map_err(|e| e.to_string())?.is_empty();
        if empty != (cp.distance > 0.0) {
            disagreements += 1;
        }
    }
    check(
        worst <= 1e-3 && disagreements == 0,
        format!("max distance error vs 200x200 grid {worst:.3e}; is_empty disagreements {disagreements}"),
    )
}

fn conservation(runs: &[Option<&ScenarioResult>], protocol: f64) -> Verdict {
    let mut worst = protocol;
    for r in runs.iter().flatten() {
        worst = worst.max(r.max_conservation_residual);
    }
    check(worst <= 1e-12, format!("max |Σ_j δ_ij - δ_i| = {worst:.3e}"))
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let mut config = bundled_config();
        config.output.dir = tmp.path().join(name).to_string_lossy().into_owned();
        run_to_dir(&config).map_err(|e| e.to_string())?;
        let read = |f: &str| fs::read(tmp.path().join(name).join(f)).map_err(|e| e.to_string());
        files.push((read(RESULT_FILE)?, read(MESSAGES_FILE)?));
    }
    let same = files[0] == files[1];
    check(
        same,
        format!("result.csv {} bytes, messages.csv {} bytes, identical: {same}", files[0].0.len(), files[0].1.len()),
    )
}

fn main() {
    let mut residual = 0.0;
    let (bundled, bundled_run) = bundled_safety();
    let (counterfactual, no_collab_run) = no_collab();
    let convergence = protocol_convergence(&mut residual);
    let verdicts = [
        ("endemic equilibrium", endemic()),
        ("bundled scenario safety", bundled),
        ("collaboration counterfactual", counterfactual),
        ("protocol convergence", convergence),
        ("decomposition identity", decomposition_identity()),
        ("Lie-table consistency", lie_consistency()),
        ("geometry oracle", geometry_oracle()),
        ("partition conservation", conservation(&[bundled_run.as_ref(), no_collab_run.as_ref()], residual)),
        ("determinism", determinism()),
    ];
    let mut failed = 0;
    for (k, (name, verdict)) in verdicts.iter().enumerate() {
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {}: {tag} {name}: {detail}", k + 1);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
