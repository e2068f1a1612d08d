//! Pipeline commands and the process exit-code contract:
//! 0 success, 1 input error, 2 rubric compile error, 3 token-budget abort.

mod compile;
mod score;
mod synthesize;
mod trees;

pub use compile::{cmd_compile_rubric, CompileMode};
pub use score::{cmd_score, ScoreInput};
pub use synthesize::{cmd_synthesize, SynthSummary};
pub use trees::{cmd_build_trees, TreesSummary};

use std::fmt;

#[derive(Debug)]
pub enum CmdError {
    /// Unreadable, missing, or inconsistent inputs (exit 1).
    Input(anyhow::Error),
    /// Rubric compilation failed (exit 2).
    Compile(anyhow::Error),
    /// Token budget exhausted; partial outputs flushed where declared (exit 3).
    Budget(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Input(_) => 1,
            CmdError::Compile(_) => 2,
            CmdError::Budget(_) => 3,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Input(e) => write!(f, "{e:#}"),
            CmdError::Compile(e) => write!(f, "{e:#}"),
            CmdError::Budget(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CmdError {
    fn from(e: anyhow::Error) -> Self {
        CmdError::Input(e)
    }
}
