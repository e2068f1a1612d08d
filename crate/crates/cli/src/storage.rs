//! Typed readers and writers for the pipeline's file formats. All writes
//! go through the canonical (sorted-key) serializer with atomic rename,
//! so identical runs produce byte-identical files.

use std::path::Path;

use anyhow::{bail, Context, Result};

use treescore_core::domain::{
    validate_question_spec, QuestionSpec, StudentResponse, ThoughtTree,
};
use treescore_core::json;

/// Load and validate a question spec; violations are an input error.
pub fn load_question(path: &Path) -> Result<QuestionSpec> {
    let question: QuestionSpec = json::read_json(path)
        .with_context(|| format!("cannot load question {}", path.display()))?;
    let report = validate_question_spec(&question);
    if !report.is_valid() {
        bail!("invalid question spec {}:\n{report}", path.display());
    }
    Ok(question)
}

/// Load responses and check gold scores against the question's range.
pub fn load_responses(path: &Path, question: &QuestionSpec) -> Result<Vec<StudentResponse>> {
    let responses: Vec<StudentResponse> = json::read_jsonl(path)
        .with_context(|| format!("cannot load responses {}", path.display()))?;
    let mut seen = std::collections::BTreeSet::new();
    for response in &responses {
        if !seen.insert(response.id.as_str()) {
            bail!("duplicate response id '{}'", response.id);
        }
        if let Some(gold) = response.gold_score {
            if !question.score_range.contains(gold) {
                bail!(
                    "response '{}' gold score {gold} outside range {}..={}",
                    response.id,
                    question.score_range.min,
                    question.score_range.max
                );
            }
        }
    }
    Ok(responses)
}

pub fn load_trees(path: &Path) -> Result<Vec<ThoughtTree>> {
    json::read_jsonl(path).with_context(|| format!("cannot load trees {}", path.display()))
}

pub fn write_trees(path: &Path, trees: &[ThoughtTree]) -> Result<()> {
    json::write_jsonl_atomic(path, trees)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
