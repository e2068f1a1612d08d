//! `build-trees`: one thought tree per response, written as JSONL with
//! skipped trees included, plus a run summary (counts, calls, cost).

use std::path::PathBuf;

use anyhow::anyhow;

use treescore_core::backend::{estimate_cost, Backend, BackendError, TokenUsage};
use treescore_core::tree::{build_trees_parallel, TreeError};

use crate::config::{build_backend, RunConfig};
use crate::storage;

use super::CmdError;

#[derive(Debug)]
pub struct TreesSummary {
    pub responses: usize,
    pub written: usize,
    pub skipped: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub usage: TokenUsage,
    pub estimated_cost: f64,
    pub out_path: PathBuf,
}

pub fn cmd_build_trees(config: &RunConfig) -> Result<TreesSummary, CmdError> {
    config.validate_inputs(true).map_err(CmdError::Input)?;
    let question = storage::load_question(&config.paths.question).map_err(CmdError::Input)?;
    let responses =
        storage::load_responses(&config.paths.responses, &question).map_err(CmdError::Input)?;
    let backend = build_backend(config).map_err(CmdError::Input)?;

    let results = build_trees_parallel(
        &question,
        &responses,
        &config.prompt,
        &config.sampling,
        &backend,
        config.backend.max_in_flight,
    );

    let mut trees = Vec::with_capacity(results.len());
    let mut failure: Option<TreeError> = None;
    for result in results {
        match result {
            Ok(outcome) => trees.push(outcome.tree),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }

    let out_path = config.paths.out_dir.join("trees.jsonl");
    std::fs::create_dir_all(&config.paths.out_dir)
        .map_err(|e| CmdError::Input(anyhow!("cannot create out dir: {e}")))?;
    storage::write_trees(&out_path, &trees).map_err(CmdError::Input)?;

    if let Some(error) = failure {
        // Partial output stays on disk; the budget abort is its own code.
        return Err(match error {
            TreeError::Backend(BackendError::BudgetExceeded { used, budget }) => {
                CmdError::Budget(anyhow!(
                    "token budget exhausted ({used}/{budget}); {} trees flushed to {}",
                    trees.len(),
                    out_path.display()
                ))
            }
            other => CmdError::Input(anyhow!("tree build failed: {other}")),
        });
    }

    let skipped = trees.iter().filter(|t| t.is_skipped()).count();
    Ok(TreesSummary {
        responses: responses.len(),
        written: trees.len(),
        skipped,
        backend_calls: backend.calls(),
        cache_hits: backend.cache_hits(),
        usage: backend.usage(),
        estimated_cost: estimate_cost(backend.usage(), config.backend.price),
        out_path,
    })
}
