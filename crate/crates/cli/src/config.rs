//! Scenario files.
//!
//! A scenario is a TOML document with five tables:
//!
//! ```toml
//! [graph]
//! nodes = 3
//! edges = [[1, 2], [2, 1]]     # (from, to), one-based; from's state drives to
//!
//! [model]
//! kind = "sis"
//! beta = [[0.5, 0.25, 0.0], ...] # row i holds the rates into node i
//! gamma = 0.3                  # scalar or one value per node
//! u_max = 0.75
//! lie_forms = "exact"          # or "published"
//!
//! [barrier]
//! threshold = [0.1, 0.12, 0.18]
//! eta = 1.0
//! kappa = 1.0
//! udot = "zero"                # or "backward_difference"
//!
//! [sim]
//! dt = 0.01
//! t_final = 100.0
//! x0 = [0.04, 0.01, 0.02]
//! ...
//!
//! [output]
//! dir = "out"
//! formats = ["csv"]            # "svg" also renders plot.svg
//! ```
//!
//! Parsing fills every default and expands scalars to per-node lists; the
//! result dumps back to TOML as the canonical form of the scenario.

use std::fmt;

use ccbf_core::barrier::{BarrierSpec, UdotPolicy};
use ccbf_core::collab::{ProtocolConfig, Weighting, DEFICIT_TOL};
use ccbf_core::dynamics::{LieForms, SisModel, SisParams};
use ccbf_core::graph::NetworkGraph;
use ccbf_core::simulate::SimConfig;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// One schema violation, located by a dotted path such as `model.beta[0][1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl ConfigIssue {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// A scalar shared by every node or one value per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerNode {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerNode {
    fn expand(&mut self, n: usize) {
        if let PerNode::Uniform(v) = *self {
            *self = PerNode::Each(vec![v; n]);
        }
    }

    /// Per-node values. Only meaningful after normalization.
    pub fn values(&self) -> &[f64] {
        match self {
            PerNode::Uniform(v) => std::slice::from_ref(v),
            PerNode::Each(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LieFormsChoice {
    #[default]
    Exact,
    Published,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UdotChoice {
    #[default]
    Zero,
    BackwardDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingChoice {
    /// 1-norm of the coupling vector.
    #[default]
    Abs,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub nodes: usize,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub beta: Vec<Vec<f64>>,
    pub gamma: PerNode,
    pub u_max: PerNode,
    #[serde(default)]
    pub lie_forms: LieFormsChoice,
}

fn one() -> PerNode {
    PerNode::Uniform(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub threshold: PerNode,
    #[serde(default = "one")]
    pub eta: PerNode,
    #[serde(default = "one")]
    pub kappa: PerNode,
    #[serde(default)]
    pub udot: UdotChoice,
}

fn default_dt() -> f64 {
    0.01
}
fn default_t_final() -> f64 {
    100.0
}
fn zero() -> PerNode {
    PerNode::Uniform(0.0)
}
fn default_outer_cap() -> usize {
    ProtocolConfig::default().outer_cap
}
fn default_inner_cap() -> usize {
    ProtocolConfig::default().inner_cap
}
fn default_deficit_tol() -> f64 {
    DEFICIT_TOL
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    pub x0: PerNode,
    #[serde(default = "zero")]
    pub nominal: PerNode,
    #[serde(default = "default_outer_cap")]
    pub outer_cap: usize,
    #[serde(default = "default_inner_cap")]
    pub inner_cap: usize,
    #[serde(default = "default_deficit_tol")]
    pub deficit_tol: f64,
    #[serde(default)]
    pub trace: bool,
    #[serde(default)]
    pub continue_on_infeasible: bool,
    #[serde(default = "yes")]
    pub collaboration: bool,
    #[serde(default)]
    pub persist_requests: bool,
    #[serde(default)]
    pub weighting: WeightingChoice,
}

fn default_dir() -> String {
    "out".into()
}
fn default_formats() -> Vec<String> {
    vec!["csv".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

pub const FORMATS: [&str; 2] = ["csv", "svg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub graph: GraphSection,
    pub model: ModelSection,
    pub barrier: BarrierSection,
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// The bundled three-node scenario.
pub const PAPER_SIS3: &str = include_str!("../scenarios/paper_sis3.toml");

/// Resolves a bundled scenario name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "paper_sis3" => Some(PAPER_SIS3),
        _ => None,
    }
}

fn serde_issue(path: String, message: &str) -> ConfigIssue {
    // Missing fields are reported on the parent table; point at the field.
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(field) = rest.strip_suffix('`') {
            let path = if path.is_empty() || path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
            return ConfigIssue::new(path, "missing field");
        }
    }
    let path = if path.is_empty() || path == "." { "<document>".into() } else { path };
    ConfigIssue::new(path, message.trim().to_string())
}

/// Parses, normalizes and validates a scenario. Every problem found is
/// returned, each with the path it concerns.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, Vec<ConfigIssue>> {
    let de = toml::Deserializer::new(text);
    let mut config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        vec![serde_issue(path, e.inner().message())]
    })?;
    config.normalize();
    let issues = config.validate();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(issues)
    }
}

impl ScenarioConfig {
    /// Expands scalars to per-node lists and orders the edge list.
    pub fn normalize(&mut self) {
        let n = self.graph.nodes;
        self.graph.edges.sort_unstable();
        self.graph.edges.dedup();
        for p in [
            &mut self.model.gamma,
            &mut self.model.u_max,
            &mut self.barrier.threshold,
            &mut self.barrier.eta,
            &mut self.barrier.kappa,
            &mut self.sim.x0,
            &mut self.sim.nominal,
        ] {
            p.expand(n);
        }
    }

    pub fn node_count(&self) -> usize {
        self.graph.nodes
    }

    /// Canonical TOML form.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    /// Checks a normalized config.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let n = self.graph.nodes;
        if n == 0 {
            out.push(ConfigIssue::new("graph.nodes", "must be at least 1"));
            return out;
        }
        for (k, &[from, to]) in self.graph.edges.iter().enumerate() {
            let path = format!("graph.edges[{k}]");
            if !(1..=n).contains(&from) || !(1..=n).contains(&to) {
                out.push(ConfigIssue::new(path, format!("endpoint out of range 1..={n}")));
            } else if from == to {
                out.push(ConfigIssue::new(path, "self-loop"));
            }
        }

        let per_node = |out: &mut Vec<ConfigIssue>, path: &str, p: &PerNode, check: &dyn Fn(f64) -> Option<&'static str>| {
            let v = p.values();
            if v.len() != n {
                out.push(ConfigIssue::new(path, format!("expected {n} values, got {}", v.len())));
                return;
            }
            for (i, &x) in v.iter().enumerate() {
                if !x.is_finite() {
                    out.push(ConfigIssue::new(format!("{path}[{i}]"), "must be finite"));
                } else if let Some(msg) = check(x) {
                    out.push(ConfigIssue::new(format!("{path}[{i}]"), msg));
                }
            }
        };
        let positive = |x: f64| (x <= 0.0).then_some("must be positive");
        let nonnegative = |x: f64| (x < 0.0).then_some("must be nonnegative");
        let unit = |x: f64| (!(0.0..=1.0).contains(&x)).then_some("must lie in [0, 1]");
        let any = |_: f64| None;

        if self.model.beta.len() != n {
            out.push(ConfigIssue::new(
                "model.beta",
                format!("expected {n} rows, got {}", self.model.beta.len()),
            ));
        } else {
            for (i, row) in self.model.beta.iter().enumerate() {
                if row.len() != n {
                    out.push(ConfigIssue::new(
                        format!("model.beta[{i}]"),
                        format!("expected {n} entries, got {}", row.len()),
                    ));
                    continue;
                }
                for (j, &b) in row.iter().enumerate() {
                    let path = format!("model.beta[{i}][{j}]");
                    if !b.is_finite() || b < 0.0 {
                        out.push(ConfigIssue::new(path, "must be finite and nonnegative"));
                    } else if i != j {
                        let edge = self.graph.edges.contains(&[j + 1, i + 1]);
                        if (b > 0.0) != edge {
                            out.push(ConfigIssue::new(
                                path,
                                format!(
                                    "rate {b} disagrees with edge [{}, {}] being {}",
                                    j + 1,
                                    i + 1,
                                    if edge { "present" } else { "absent" }
                                ),
                            ));
                        }
                    }
                }
            }
        }
        per_node(&mut out, "model.gamma", &self.model.gamma, &positive);
        per_node(&mut out, "model.u_max", &self.model.u_max, &positive);
        per_node(&mut out, "barrier.threshold", &self.barrier.threshold, &unit);
        per_node(&mut out, "barrier.eta", &self.barrier.eta, &nonnegative);
        per_node(&mut out, "barrier.kappa", &self.barrier.kappa, &nonnegative);
        per_node(&mut out, "sim.x0", &self.sim.x0, &unit);
        per_node(&mut out, "sim.nominal", &self.sim.nominal, &any);

        let sim = &self.sim;
        if !(sim.dt > 0.0) || !sim.dt.is_finite() {
            out.push(ConfigIssue::new("sim.dt", "must be positive"));
        } else if !(sim.t_final > sim.dt) || !sim.t_final.is_finite() {
            out.push(ConfigIssue::new("sim.t_final", "must exceed sim.dt"));
        }
        if sim.outer_cap == 0 {
            out.push(ConfigIssue::new("sim.outer_cap", "must be at least 1"));
        }
        if sim.inner_cap == 0 {
            out.push(ConfigIssue::new("sim.inner_cap", "must be at least 1"));
        }
        if !(sim.deficit_tol >= 0.0) || !sim.deficit_tol.is_finite() {
            out.push(ConfigIssue::new("sim.deficit_tol", "must be finite and nonnegative"));
        }
        for (k, f) in self.output.formats.iter().enumerate() {
            if !FORMATS.contains(&f.as_str()) {
                out.push(ConfigIssue::new(
                    format!("output.formats[{k}]"),
                    format!("unknown format {f:?}, expected one of {FORMATS:?}"),
                ));
            }
        }
        out
    }

    pub fn graph(&self) -> NetworkGraph {
        let edges = self.graph.edges.iter().map(|&[a, b]| (a - 1, b - 1));
        NetworkGraph::scalar(self.graph.nodes, edges).expect("validated edge list")
    }

    /// Builds the simulation inputs from a validated config.
    pub fn build(&self) -> ccbf_core::Result<Scenario> {
        let n = self.graph.nodes;
        let graph = self.graph();
        let beta = DMatrix::from_fn(n, n, |i, j| self.model.beta[i][j]);
        let params = SisParams {
            beta,
            gamma: DVector::from_column_slice(self.model.gamma.values()),
            u_max: DVector::from_column_slice(self.model.u_max.values()),
        };
        let forms = match self.model.lie_forms {
            LieFormsChoice::Exact => LieForms::Exact,
            LieFormsChoice::Published => LieForms::Published,
        };
        let model = SisModel::new(graph, params, forms)?;
        let udot = match self.barrier.udot {
            UdotChoice::Zero => UdotPolicy::Zero,
            UdotChoice::BackwardDifference => UdotPolicy::BackwardDifference,
        };
        let barriers = (0..n)
            .map(|i| {
                BarrierSpec::new(
                    self.barrier.threshold.values()[i],
                    self.barrier.eta.values()[i],
                    self.barrier.kappa.values()[i],
                )
                .with_udot(udot)
            })
            .collect();
        let scalar = |v: &[f64]| v.iter().map(|&x| DVector::from_element(1, x)).collect::<Vec<_>>();
        let sim = SimConfig {
            dt: self.sim.dt,
            t_final: self.sim.t_final,
            nominal: scalar(self.sim.nominal.values()),
            protocol: ProtocolConfig {
                outer_cap: self.sim.outer_cap,
                inner_cap: self.sim.inner_cap,
                weighting: match self.sim.weighting {
                    WeightingChoice::Abs => Weighting::CouplingNorm,
                    WeightingChoice::Uniform => Weighting::Uniform,
                },
                deficit_tol: self.sim.deficit_tol,
                record_history: false,
            },
            collaboration: self.sim.collaboration,
            trace: self.sim.trace,
            continue_on_infeasible: self.sim.continue_on_infeasible,
            persist_requests: self.sim.persist_requests,
        };
        Ok(Scenario {
            model,
            barriers,
            x0: scalar(self.sim.x0.values()),
            sim,
        })
    }
}

/// Everything a simulation run needs.
pub struct Scenario {
    pub model: SisModel,
    pub barriers: Vec<BarrierSpec>,
    pub x0: Vec<DVector<f64>>,
    pub sim: SimConfig,
}
