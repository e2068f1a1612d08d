//! `synthesize`: turns trees into sft.jsonl, prefs.jsonl, r2s.jsonl, and
//! stats.json. Skipped trees and responses without gold marks contribute
//! nothing but are counted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rayon::prelude::*;

use treescore_core::backend::{estimate_cost, Backend, BackendError, TokenUsage};
use treescore_core::domain::{PreferencePair, ScoreRecord, SftRecord, StudentResponse, ThoughtTree};
use treescore_core::factory::{synthesize_response, FactoryError, ResponseSynthesis};
use treescore_core::json;
use treescore_core::metrics::{dataset_stats, DatasetStats};

use crate::config::{build_backend, RunConfig};
use crate::storage;

use super::CmdError;

#[derive(Debug)]
pub struct SynthSummary {
    pub stats: DatasetStats,
    pub adjudication_fallbacks: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub usage: TokenUsage,
    pub estimated_cost: f64,
    pub out_dir: PathBuf,
}

pub fn cmd_synthesize(
    config: &RunConfig,
    trees_path: Option<&Path>,
) -> Result<SynthSummary, CmdError> {
    config.validate_inputs(true).map_err(CmdError::Input)?;
    let question = storage::load_question(&config.paths.question).map_err(CmdError::Input)?;
    let responses =
        storage::load_responses(&config.paths.responses, &question).map_err(CmdError::Input)?;
    let default_trees = config.paths.out_dir.join("trees.jsonl");
    let trees_path = trees_path.unwrap_or(&default_trees);
    if !trees_path.exists() {
        return Err(CmdError::Input(anyhow!(
            "trees file not found: {} (run build-trees first)",
            trees_path.display()
        )));
    }
    let trees = storage::load_trees(trees_path).map_err(CmdError::Input)?;
    let by_id: BTreeMap<&str, &StudentResponse> =
        responses.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut skipped = 0u64;
    let mut no_gold = 0u64;
    let mut missing: Vec<&str> = Vec::new();
    let mut work: Vec<(&ThoughtTree, &StudentResponse)> = Vec::new();
    for tree in &trees {
        let Some(response) = by_id.get(tree.response_id.as_str()) else {
            missing.push(&tree.response_id);
            continue;
        };
        if tree.is_skipped() {
            skipped += 1;
        } else if response.gold_score.is_none() {
            no_gold += 1;
        } else {
            work.push((tree, response));
        }
    }
    if !missing.is_empty() {
        return Err(CmdError::Input(anyhow!(
            "trees reference unknown response ids: {}",
            missing.join(", ")
        )));
    }

    let backend = build_backend(config).map_err(CmdError::Input)?;
    let factory_config = config.factory_config();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.backend.max_in_flight.max(1))
        .build()
        .map_err(|e| CmdError::Input(anyhow!("worker pool: {e}")))?;
    let results: Vec<Result<ResponseSynthesis, FactoryError>> = pool.install(|| {
        work.par_iter()
            .map(|(tree, response)| {
                synthesize_response(
                    &question,
                    response,
                    tree,
                    &factory_config,
                    &config.sampling,
                    &backend,
                )
            })
            .collect()
    });

    let mut sft: Vec<SftRecord> = Vec::new();
    let mut pairs: Vec<PreferencePair> = Vec::new();
    let mut score_records: Vec<ScoreRecord> = Vec::new();
    let mut rejected = 0u64;
    let mut fallbacks = 0u64;
    for result in results {
        match result {
            Ok(synthesis) => {
                rejected += u64::from(synthesis.rejected_paths);
                fallbacks += u64::from(synthesis.adjudication_fallback);
                sft.extend(synthesis.sft);
                pairs.extend(synthesis.pairs);
                score_records.extend(synthesis.score_records);
            }
            Err(FactoryError::Backend(BackendError::BudgetExceeded { used, budget })) => {
                return Err(CmdError::Budget(anyhow!(
                    "token budget exhausted during synthesis ({used}/{budget})"
                )))
            }
            Err(e) => return Err(CmdError::Input(anyhow!("synthesis failed: {e}"))),
        }
    }

    let stats = dataset_stats(
        trees.len() as u64,
        sft.len() as u64,
        pairs.len() as u64,
        score_records.len() as u64,
        skipped,
        no_gold,
        rejected,
    );

    let out_dir = &config.paths.out_dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CmdError::Input(anyhow!("cannot create out dir: {e}")))?;
    json::write_jsonl_atomic(&out_dir.join("sft.jsonl"), &sft)
        .map_err(|e| CmdError::Input(e.into()))?;
    json::write_jsonl_atomic(&out_dir.join("prefs.jsonl"), &pairs)
        .map_err(|e| CmdError::Input(e.into()))?;
    json::write_jsonl_atomic(&out_dir.join("r2s.jsonl"), &score_records)
        .map_err(|e| CmdError::Input(e.into()))?;
    json::write_json_atomic(&out_dir.join("stats.json"), &stats)
        .map_err(|e| CmdError::Input(e.into()))?;

    Ok(SynthSummary {
        stats,
        adjudication_fallbacks: fallbacks,
        backend_calls: backend.calls(),
        cache_hits: backend.cache_hits(),
        usage: backend.usage(),
        estimated_cost: estimate_cost(backend.usage(), config.backend.price),
        out_dir: out_dir.clone(),
    })
}
