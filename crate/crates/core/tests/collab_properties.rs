//! Invariants of the negotiation protocol on randomized scalar-control
//! networks.

use std::collections::BTreeMap;

use ccbf_core::barrier::{max_capability, QuadraticForm};
use ccbf_core::collab::{
    collaborative_safety, CollabLedger, Collaboration, MessageKind, NodeInput, ProtocolConfig,
    ProtocolOutcome, ProtocolStatus,
};
use ccbf_core::geometry::{BoxSet, ControlRegion};
use ccbf_core::{Error, NetworkGraph};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

/// Random digraph with positive couplings (so every node's request normals
/// share a sign), concave or affine self terms and random boxes.
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
                .map(|&j| (j, v(rng.gen_range(0.01..1.0))))
                .collect();
            let quadratic = if rng.gen_bool(0.5) { -rng.gen_range(0.0..0.5) } else { 0.0 };
            NodeInput {
                coupling,
                self_term: QuadraticForm {
                    constant: rng.gen_range(-0.6..0.4),
                    linear: v(rng.gen_range(-0.5..0.5)),
                    quadratic: DMatrix::from_element(1, 1, quadratic),
                },
                bounds: BoxSet::interval(lo, hi),
            }
        })
        .collect();
    (graph, inputs)
}

/// Like [`random_instance`], but shifted so that a random joint control
/// satisfies every node's condition with margin: never terminally
/// infeasible.
fn feasible_instance(rng: &mut ChaCha8Rng) -> (NetworkGraph, Vec<NodeInput>) {
    let (graph, mut inputs) = random_instance(rng);
    let witness: Vec<DVector<f64>> = inputs
        .iter()
        .map(|inp| v(rng.gen_range(inp.bounds.lower()[0]..=inp.bounds.upper()[0])))
        .collect();
    for i in 0..inputs.len() {
        let value: f64 = inputs[i].coupling.iter().map(|(&j, a)| a.dot(&witness[j])).sum::<f64>()
            + inputs[i].self_term.eval(&witness[i]);
        let margin = rng.gen_range(0.0..0.2);
        inputs[i].self_term.constant += (margin - value).max(0.0);
    }
    (graph, inputs)
}

fn run(graph: &NetworkGraph, inputs: &[NodeInput]) -> ProtocolOutcome {
    let config = ProtocolConfig {
        record_history: true,
        ..Default::default()
    };
    Collaboration::new(graph, inputs, config).unwrap().run().unwrap()
}

fn interval(r: &ControlRegion) -> (f64, f64) {
    r.interval().expect("nonempty region")
}

#[test]
fn returned_regions_honor_every_accepted_request() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut returned = 0;
    for _ in 0..300 {
        let (graph, inputs) = random_instance(&mut rng);
        let out = run(&graph, &inputs);
        if matches!(out.status, ProtocolStatus::TerminallyInfeasible(_)) {
            continue;
        }
        returned += 1;
        for (i, ledger) in out.ledgers.iter().enumerate() {
            let (lo, hi) = interval(&ledger.region);
            for s in 0..=20 {
                let u = v(lo + (hi - lo) * s as f64 / 20.0);
                for &k in graph.out_neighbors(i).unwrap() {
                    let a = &inputs[k].coupling[&i];
                    assert!(a.dot(&u) + ledger.in_req[&k] >= -1e-9);
                }
            }
        }
    }
    assert!(returned > 100, "only {returned} instances returned regions");
}

#[test]
fn adjustments_are_nonnegative_and_partitions_conserve() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (graph, inputs) = random_instance(&mut rng);
        let out = run(&graph, &inputs);
        assert!(out.max_conservation_residual <= 1e-12);
        for m in &out.messages {
            if m.kind == MessageKind::Adjustment {
                assert!(m.value >= 0.0);
            }
        }
    }
}

/// Splits the history into the snapshots of each Collaborate call. The
/// constrained sets restart empty at the beginning of every call.
fn calls(out: &ProtocolOutcome) -> Vec<&[Vec<CollabLedger>]> {
    let mut groups = Vec::new();
    let mut start = 0;
    for k in 1..out.history.len() {
        let new_call = out.history[k]
            .iter()
            .zip(&out.history[k - 1])
            .any(|(now, before)| now.round != before.round);
        if new_call {
            groups.push(&out.history[start..k]);
            start = k;
        }
    }
    groups.push(&out.history[start..]);
    groups
}

#[test]
fn constrained_sets_only_grow_within_a_call() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let (graph, inputs) = random_instance(&mut rng);
        let out = run(&graph, &inputs);
        for group in calls(&out) {
            for w in group.windows(2) {
                for (before, now) in w[0].iter().zip(&w[1]) {
                    assert!(before.constrained.is_subset(&now.constrained));
                }
            }
        }
    }
}

#[test]
fn regions_only_shrink_across_sub_rounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let (graph, inputs) = random_instance(&mut rng);
        let out = run(&graph, &inputs);
        let mut previous: Vec<(f64, f64)> = inputs
            .iter()
            .map(|inp| (inp.bounds.lower()[0], inp.bounds.upper()[0]))
            .collect();
        for snapshot in &out.history {
            for (i, ledger) in snapshot.iter().enumerate() {
                let (lo, hi) = interval(&ledger.region);
                let (plo, phi) = previous[i];
                assert!(lo >= plo - 1e-9 && hi <= phi + 1e-9, "node {i}: [{lo}, {hi}] not in [{plo}, {phi}]");
                previous[i] = (lo, hi);
            }
        }
    }
}

#[test]
fn accepted_requests_never_loosen_after_an_adjustment() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..200 {
        let (graph, inputs) = random_instance(&mut rng);
        let out = run(&graph, &inputs);
        let mut adjusted = BTreeMap::new();
        let mut last: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (round, snapshot) in out.history.iter().enumerate() {
            for m in out.messages.iter().filter(|m| m.sub_round == round + 1) {
                if m.kind == MessageKind::Adjustment && m.value > 0.0 {
                    adjusted.entry((m.to, m.from)).or_insert(round);
                }
            }
            for (i, ledger) in snapshot.iter().enumerate() {
                for (&k, &c) in &ledger.in_req {
                    if let (Some(_), Some(&prev)) = (adjusted.get(&(k, i)), last.get(&(k, i))) {
                        assert!(c <= prev + 1e-12, "c̄_{k}{i} rose from {prev} to {c}");
                    }
                    last.insert((k, i), c);
                }
            }
        }
    }
}

#[test]
fn identical_inputs_give_identical_logs() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let (graph, inputs) = random_instance(&mut rng);
        let a = run(&graph, &inputs);
        let b = run(&graph, &inputs);
        let text = |o: &ProtocolOutcome| format!("{:?}", o.messages);
        assert_eq!(text(&a), text(&b));
    }
}

#[test]
fn zero_authority_above_threshold_is_terminally_infeasible() {
    // Every node already needs help and no node can move.
    let graph = NetworkGraph::complete(3);
    let inputs: Vec<NodeInput> = (0..3)
        .map(|i| NodeInput {
            coupling: graph.in_neighbors(i).unwrap().iter().map(|&j| (j, v(0.05))).collect(),
            self_term: QuadraticForm::affine(-0.2, v(0.1)),
            bounds: BoxSet::interval(0.0, 0.0),
        })
        .collect();
    match collaborative_safety(&graph, &inputs, ProtocolConfig::default()) {
        Err(Error::TerminallyInfeasible { nodes }) => assert_eq!(nodes, [0, 1, 2]),
        other => panic!("expected terminal infeasibility, got {other:?}"),
    }
}

#[test]
fn converged_argmax_choice_is_jointly_safe() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for _ in 0..300 {
        let (graph, inputs) = feasible_instance(&mut rng);
        let out = run(&graph, &inputs);
        if out.status != ProtocolStatus::Converged {
            continue;
        }
        checked += 1;
        let u: Vec<DVector<f64>> = out
            .ledgers
            .iter()
            .zip(&inputs)
            .map(|(l, inp)| max_capability(&inp.self_term, &l.region).unwrap().argmax)
            .collect();
        for i in 0..inputs.len() {
            let value: f64 = inputs[i].coupling.iter().map(|(&j, a)| a.dot(&u[j])).sum::<f64>()
                + inputs[i].self_term.eval(&u[i]);
            assert!(value >= -1e-8, "node {i}: condition value {value}");
        }
    }
    assert!(checked > 200, "only {checked} instances converged");
}

#[test]
fn feasible_instances_rarely_stop_short() {
    // The negotiation is greedy: a node may accept demands that later leave
    // it without help, so a small fraction of feasible instances end short.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut short = 0;
    for _ in 0..500 {
        let (graph, inputs) = feasible_instance(&mut rng);
        if run(&graph, &inputs).status != ProtocolStatus::Converged {
            short += 1;
        }
    }
    assert!(short <= 25, "{short} of 500 feasible instances stopped short");
}
