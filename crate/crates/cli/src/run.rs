//! `run` and `sweep`: execute scenarios and persist their artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ccbf_core::simulate::{run_scenario, write_messages_csv, write_result_csv, ScenarioResult};
use serde::{Deserialize, Serialize};

use crate::config::{bundled, parse_config, ScenarioConfig};
use crate::error::CliError;
use crate::plot::{plot_file, Limits};

pub const RESULT_FILE: &str = "result.csv";
pub const MESSAGES_FILE: &str = "messages.csv";
pub const MANIFEST_FILE: &str = "meta.json";
pub const PLOT_FILE: &str = "plot.svg";

/// Command-line adjustments applied on top of a scenario file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub trace: bool,
    pub no_collab: bool,
    pub continue_on_infeasible: bool,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
}

impl Overrides {
    /// Applies the overrides and re-checks the result.
    pub fn apply(&self, config: &mut ScenarioConfig, origin: &str) -> Result<(), CliError> {
        if let Some(out) = &self.out {
            config.output.dir = out.to_string_lossy().into_owned();
        }
        config.sim.trace |= self.trace;
        config.sim.continue_on_infeasible |= self.continue_on_infeasible;
        if self.no_collab {
            config.sim.collaboration = false;
        }
        if let Some(dt) = self.dt {
            config.sim.dt = dt;
        }
        if let Some(t) = self.t_final {
            config.sim.t_final = t;
        }
        let issues = config.validate();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config {
                origin: origin.into(),
                issues,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleRecord {
    pub time: f64,
    /// One-based.
    pub nodes: Vec<usize>,
}

/// `meta.json`: everything needed to reproduce `result.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub wall_time_s: f64,
    pub status: String,
    pub rows: usize,
    pub infeasible: Vec<InfeasibleRecord>,
    pub max_conservation_residual: f64,
    /// Canonical scenario text; `ccbf run meta.json` re-runs from it.
    pub config_toml: String,
    pub config: ScenarioConfig,
}

/// Text of a scenario given as a bundled name, a TOML file or a manifest.
pub fn load_scenario(spec: &str) -> Result<ScenarioConfig, CliError> {
    let (origin, text) = match bundled(spec) {
        Some(text) => (spec.to_string(), text.to_string()),
        None => {
            let path = Path::new(spec);
            let raw = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            if path.extension().is_some_and(|e| e == "json") {
                let manifest: Manifest = serde_json::from_str(&raw)
                    .map_err(|e| CliError::Data(format!("{}: not a run manifest: {e}", path.display())))?;
                (spec.to_string(), manifest.config_toml)
            } else {
                (spec.to_string(), raw)
            }
        }
    };
    parse_config(&text).map_err(|issues| CliError::Config { origin, issues })
}

/// Builds and simulates a validated scenario.
pub fn simulate(config: &ScenarioConfig) -> Result<ScenarioResult, CliError> {
    let scenario = config.build()?;
    Ok(run_scenario(&scenario.model, &scenario.barriers, &scenario.x0, &scenario.sim)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn limits(config: &ScenarioConfig) -> Limits {
    Limits {
        thresholds: config.barrier.threshold.values().to_vec(),
        u_max: config.model.u_max.values().to_vec(),
    }
}

/// Runs `config` and writes its artifacts into `config.output.dir`.
///
/// A run that halts at a terminally infeasible state still writes every
/// artifact and then returns [`CliError::Infeasible`].
pub fn run_to_dir(config: &ScenarioConfig) -> Result<ScenarioResult, CliError> {
    let dir = PathBuf::from(&config.output.dir);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let started = Instant::now();
    let result = simulate(config)?;
    let wall = started.elapsed().as_secs_f64();

    let path = dir.join(RESULT_FILE);
    let mut w = create(&path)?;
    write_result_csv(&result, &mut w).map_err(|e| CliError::io(&path, e))?;
    finish(w, &path)?;
    if config.sim.trace {
        let path = dir.join(MESSAGES_FILE);
        let mut w = create(&path)?;
        write_messages_csv(&result, &mut w).map_err(|e| CliError::io(&path, e))?;
        finish(w, &path)?;
    }
    if config.output.formats.iter().any(|f| f == "svg") {
        plot_file(&dir.join(RESULT_FILE), &dir.join(PLOT_FILE), &limits(config))?;
    }

    let manifest = Manifest {
        tool: "ccbf".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: ccbf_core::VERSION.into(),
        wall_time_s: wall,
        status: if result.halted { "terminally_infeasible" } else { "ok" }.into(),
        rows: result.len(),
        infeasible: result
            .infeasible
            .iter()
            .map(|e| InfeasibleRecord {
                time: e.time,
                nodes: e.nodes.iter().map(|i| i + 1).collect(),
            })
            .collect(),
        max_conservation_residual: result.max_conservation_residual,
        config_toml: config.dump(),
        config: config.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    log::info!("wrote {} rows to {} in {wall:.2} s", result.len(), dir.display());

    if result.halted {
        let last = result.infeasible.last().expect("halted runs record the event");
        return Err(CliError::Infeasible {
            time: last.time,
            nodes: last.nodes.iter().map(|i| i + 1).collect(),
        });
    }
    Ok(result)
}

/// One swept parameter: a dotted key into the scenario and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

/// Splits on commas outside brackets.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    /// `key=v1,v2,...`, each value a TOML literal or a bare string.
    fn from_str(s: &str) -> Result<Self, String> {
        let (key, rest) = s.split_once('=').ok_or_else(|| format!("expected key=v1,v2,..., got {s:?}"))?;
        let key = key.trim();
        if key.split('.').count() < 2 {
            return Err(format!("key {key:?} must name a table and a field, e.g. barrier.eta"));
        }
        let values = split_top_level(rest)
            .into_iter()
            .map(|raw| {
                let raw = raw.trim();
                if raw.is_empty() {
                    return Err(format!("empty value in {s:?}"));
                }
                // Bare words such as `zero` are taken as strings.
                Ok(match format!("v = {raw}").parse::<toml::Table>() {
                    Ok(doc) => doc["v"].clone(),
                    Err(_) => toml::Value::String(raw.to_string()),
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(SweepAxis {
            key: key.to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub assignment: Vec<(String, toml::Value)>,
    pub dir: PathBuf,
    pub status: String,
    /// Most negative `h_i` over all nodes and rows; `0` when safe.
    pub min_violation: Option<f64>,
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("key has at least two parts");
    let mut cur = table;
    for p in parts {
        cur = cur
            .get_mut(p)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| format!("no table {p:?} for key {key:?}"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Cartesian product of `axes` over `base`, run on `jobs` worker threads.
/// Each point writes into its own `run_NNN` directory under `out`, and an
/// index is written to `out/sweep.csv`. Infeasible points are recorded,
/// not fatal.
pub fn sweep(
    base: &ScenarioConfig,
    axes: &[SweepAxis],
    overrides: &Overrides,
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepPoint>, CliError> {
    let base_table: toml::Table = base.dump().parse().expect("canonical dump parses");
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }

    let mut configs = Vec::with_capacity(points.len());
    for (k, assignment) in points.iter().enumerate() {
        let origin = format!("sweep point {k}");
        let mut table = base_table.clone();
        for (key, value) in assignment {
            set_key(&mut table, key, value.clone()).map_err(|m| CliError::Config {
                origin: origin.clone(),
                issues: vec![crate::config::ConfigIssue {
                    path: key.clone(),
                    message: m,
                }],
            })?;
        }
        let text = toml::to_string(&table).expect("table serializes");
        let mut config = parse_config(&text).map_err(|issues| CliError::Config {
            origin: origin.clone(),
            issues,
        })?;
        let dir = out.join(format!("run_{k:03}"));
        let mut ov = overrides.clone();
        ov.out = Some(dir.clone());
        ov.apply(&mut config, &origin)?;
        configs.push((dir, config));
    }

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SweepPoint, CliError>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(configs.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some((dir, config)) = configs.get(k) else { break };
                let outcome = match run_to_dir(config) {
                    Ok(r) => Ok(("ok".to_string(), Some(min_violation(&r)))),
                    Err(CliError::Infeasible { .. }) => Ok(("terminally_infeasible".to_string(), None)),
                    Err(e) => Err(e),
                };
                let point = outcome.map(|(status, min_violation)| SweepPoint {
                    index: k,
                    assignment: points[k].clone(),
                    dir: dir.clone(),
                    status,
                    min_violation,
                });
                slots.lock().expect("sweep slots")[k] = Some(point);
            });
        }
    });
    let results: Vec<SweepPoint> = slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .map(|p| p.expect("every point ran"))
        .collect::<Result<_, _>>()?;

    let index = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&index).map_err(|e| CliError::Data(format!("{}: {e}", index.display())))?;
    let mut header = vec!["run".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(["status".into(), "min_violation".into(), "dir".into()]);
    let mut rows = vec![header];
    for p in &results {
        let mut row = vec![p.index.to_string()];
        row.extend(p.assignment.iter().map(|(_, v)| match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        }));
        row.push(p.status.clone());
        row.push(p.min_violation.map_or(String::new(), |v| format!("{v:.16e}")));
        row.push(p.dir.to_string_lossy().into_owned());
        rows.push(row);
    }
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::Data(format!("{}: {e}", index.display())))?;
    }
    w.flush().map_err(|e| CliError::io(&index, e))?;
    Ok(results)
}

fn min_violation(r: &ScenarioResult) -> f64 {
    r.worst_violation().into_iter().fold(0.0, f64::min)
}
