use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigIssue;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario {origin}:\n{}", format_issues(.issues))]
    Config { origin: String, issues: Vec<ConfigIssue> },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Malformed input data, e.g. a result file missing a column.
    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Sim(#[from] ccbf_core::Error),

    /// Node ids are one-based here.
    #[error("terminally infeasible state at t = {time}: nodes {nodes:?}")]
    Infeasible { time: f64, nodes: Vec<usize> },
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 internal or I/O failure, 2 bad input, 3 terminally
    /// infeasible scenario.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Data(_) => 2,
            CliError::Infeasible { .. } => 3,
            CliError::Sim(e) if matches!(e.root(), ccbf_core::Error::TerminallyInfeasible { .. }) => 3,
            CliError::Io { .. } | CliError::Sim(_) => 1,
        }
    }
}
