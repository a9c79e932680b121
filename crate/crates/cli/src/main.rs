use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccbf_cli::config::parse_config;
use ccbf_cli::plot::{plot_file, Limits};
use ccbf_cli::run::{limits, load_scenario, run_to_dir, sweep, Manifest, Overrides, SweepAxis, MANIFEST_FILE};
use ccbf_cli::CliError;
use clap::{Args, Parser, Subcommand};

/// Collaborative control barrier function simulations.
#[derive(Debug, Parser)]
#[command(name = "ccbf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunFlags {
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the protocol message trace.
    #[arg(long)]
    trace: bool,
    /// Filter each node inside its full control box, without requests.
    #[arg(long)]
    no_collab: bool,
    /// Keep simulating past terminally infeasible states.
    #[arg(long)]
    continue_on_infeasible: bool,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            trace: self.trace,
            no_collab: self.no_collab,
            continue_on_infeasible: self.continue_on_infeasible,
            dt: self.dt,
            t_final: self.t_final,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario file, a bundled scenario (`paper_sis3`) or a
    /// previous run's meta.json.
    Run {
        scenario: String,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Render a result.csv as a two-panel SVG.
    Plot {
        result: PathBuf,
        out: PathBuf,
        /// Scenario for threshold and bound lines; defaults to the
        /// meta.json next to the result.
        #[arg(long)]
        config: Option<String>,
    },
    /// Check a scenario and print its canonical form.
    Validate { scenario: String },
    /// Run the cartesian product of parameter values in parallel.
    Sweep {
        scenario: String,
        /// `key=v1,v2,...`, e.g. `barrier.eta=1,5`. Repeatable.
        #[arg(long = "set", required = true)]
        axes: Vec<SweepAxis>,
        #[arg(long, default_value_t = std::thread::available_parallelism().map_or(1, |n| n.get()))]
        jobs: usize,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn plot_limits(result: &Path, config: Option<&str>) -> Result<Limits, CliError> {
    if let Some(spec) = config {
        return Ok(limits(&load_scenario(spec)?));
    }
    let meta = result.with_file_name(MANIFEST_FILE);
    match std::fs::read_to_string(&meta) {
        Ok(text) => {
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: not a run manifest: {e}", meta.display())))?;
            let config = parse_config(&manifest.config_toml).map_err(|issues| CliError::Config {
                origin: meta.display().to_string(),
                issues,
            })?;
            Ok(limits(&config))
        }
        Err(_) => {
            log::warn!("no {} next to {}, plotting without reference lines", MANIFEST_FILE, result.display());
            Ok(Limits::default())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { scenario, flags } => {
            let mut config = load_scenario(&scenario)?;
            flags.overrides().apply(&mut config, &scenario)?;
            let result = run_to_dir(&config)?;
            let worst = result.worst_violation();
            println!("wrote {} rows to {}", result.len(), config.output.dir);
            println!("min h per node: {worst:?}");
            Ok(())
        }
        Command::Plot { result, out, config } => {
            let limits = plot_limits(&result, config.as_deref())?;
            plot_file(&result, &out, &limits)
        }
        Command::Validate { scenario } => {
            let config = load_scenario(&scenario)?;
            print!("{}", config.dump());
            Ok(())
        }
        Command::Sweep {
            scenario,
            axes,
            jobs,
            flags,
        } => {
            let config = load_scenario(&scenario)?;
            let out = flags.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
            let points = sweep(&config, &axes, &flags.overrides(), &out, jobs)?;
            for p in &points {
                println!("run {:03} {}: {}", p.index, p.dir.display(), p.status);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCBF_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
