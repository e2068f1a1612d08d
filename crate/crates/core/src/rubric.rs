//! Rubric representation, evaluation, validation, and compilation from
//! textual mark schemes.
//!
//! A rubric is the deterministic function from a complete decision vector
//! to an integer mark. Every rubric in the source corpus is count-based
//! (mark depends only on how many elements were answered), so
//! `count_threshold` is the canonical compile target; `decision_table`
//! exists for hand-authored rubrics that are not count-based.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatRequest, RequestClass, RequestMeta};
use crate::domain::{ChatMessage, Decision, ScoreRange, ValidationReport};

/// One step of a count-threshold rubric: answers with at least `min_yes`
/// elements present earn `score`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    pub min_yes: u32,
    pub score: u32,
}

/// Explicit decision-vector entry for table rubrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub pattern: Vec<Decision>,
    pub score: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RubricSpec {
    /// Thresholds are stored strictly descending in `min_yes`; the first
    /// one at or below the Yes count wins, else `default_score`.
    CountThreshold {
        thresholds: Vec<Threshold>,
        default_score: u32,
        #[serde(rename = "text", default)]
        source_text: String,
    },
    DecisionTable {
        entries: Vec<TableEntry>,
        #[serde(default)]
        default_score: Option<u32>,
        #[serde(rename = "text", default)]
        source_text: String,
    },
}

impl RubricSpec {
    pub fn source_text(&self) -> &str {
        match self {
            RubricSpec::CountThreshold { source_text, .. } => source_text,
            RubricSpec::DecisionTable { source_text, .. } => source_text,
        }
    }

    pub fn set_source_text(&mut self, text: impl Into<String>) {
        match self {
            RubricSpec::CountThreshold { source_text, .. } => *source_text = text.into(),
            RubricSpec::DecisionTable { source_text, .. } => *source_text = text.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RubricError {
    #[error("decision vector has {got} entries, rubric expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("decision vector not covered by table and no default score")]
    NotCovered,
}

/// Apply the rubric to a complete decision vector.
pub fn evaluate_rubric(rubric: &RubricSpec, decisions: &[Decision]) -> Result<u32, RubricError> {
    match rubric {
        RubricSpec::CountThreshold {
            thresholds,
            default_score,
            ..
        } => {
            let yes = decisions.iter().filter(|d| **d == Decision::Yes).count() as u32;
            Ok(thresholds
                .iter()
                .find(|t| yes >= t.min_yes)
                .map(|t| t.score)
                .unwrap_or(*default_score))
        }
        RubricSpec::DecisionTable {
            entries,
            default_score,
            ..
        } => {
            if let Some(first) = entries.first() {
                if first.pattern.len() != decisions.len() {
                    return Err(RubricError::LengthMismatch {
                        expected: first.pattern.len(),
                        got: decisions.len(),
                    });
                }
            }
            match entries.iter().find(|e| e.pattern == decisions) {
                Some(e) => Ok(e.score),
                None => default_score.ok_or(RubricError::NotCovered),
            }
        }
    }
}

fn vector_from_bits(bits: u64, m: usize) -> Vec<Decision> {
    (0..m)
        .map(|j| {
            if (bits >> j) & 1 == 1 {
                Decision::Yes
            } else {
                Decision::No
            }
        })
        .collect()
}

/// Validate structure, totality, and range of a rubric for `m` elements.
///
/// Totality is checked exhaustively over all 2^m vectors for m <= 16 and
/// by 10,000 seeded random vectors above that (noted in the report).
pub fn validate_rubric(rubric: &RubricSpec, m: usize, range: ScoreRange) -> ValidationReport {
    let mut report = ValidationReport::default();
    match rubric {
        RubricSpec::CountThreshold {
            thresholds,
            default_score,
            ..
        } => {
            for pair in thresholds.windows(2) {
                if pair[1].min_yes >= pair[0].min_yes {
                    report.violation(format!(
                        "thresholds must be strictly descending in min_yes: {} then {}",
                        pair[0].min_yes, pair[1].min_yes
                    ));
                }
                if pair[1].score > pair[0].score {
                    report.violation(format!(
                        "scores must be non-decreasing in min_yes: min_yes {} scores {} but min_yes {} scores {}",
                        pair[1].min_yes, pair[1].score, pair[0].min_yes, pair[0].score
                    ));
                }
            }
            for t in thresholds {
                if t.min_yes as usize > m {
                    report.violation(format!(
                        "threshold min_yes {} is unreachable with {} elements",
                        t.min_yes, m
                    ));
                }
            }
            if !range.contains(*default_score) {
                report.violation(format!(
                    "default score {default_score} outside range {}..={}",
                    range.min, range.max
                ));
            }
        }
        RubricSpec::DecisionTable { entries, .. } => {
            let mut seen = std::collections::BTreeSet::new();
            for entry in entries {
                if entry.pattern.len() != m {
                    report.violation(format!(
                        "table pattern length {} does not match {} elements",
                        entry.pattern.len(),
                        m
                    ));
                }
                let key = crate::domain::decision_prefix(&entry.pattern);
                if !seen.insert(key.clone()) {
                    report.violation(format!("duplicate table pattern {key}"));
                }
            }
        }
    }

    if !report.is_valid() {
        return report;
    }

    let check = |decisions: &[Decision], report: &mut ValidationReport| {
        match evaluate_rubric(rubric, decisions) {
            Ok(score) if !range.contains(score) => report.violation(format!(
                "vector {} maps to score {score} outside range {}..={}",
                crate::domain::decision_prefix(decisions),
                range.min,
                range.max
            )),
            Ok(_) => {}
            Err(e) => report.violation(format!(
                "vector {} is not covered: {e}",
                crate::domain::decision_prefix(decisions)
            )),
        }
    };

    if m <= 16 {
        for bits in 0..(1u64 << m) {
            let decisions = vector_from_bits(bits, m);
            check(&decisions, &mut report);
            if report.violations.len() > 8 {
                report.note("further totality violations suppressed");
                break;
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5255_4252);
        for _ in 0..10_000 {
            let bits: u64 = rng.random();
            let decisions = vector_from_bits(bits, m);
            check(&decisions, &mut report);
            if report.violations.len() > 8 {
                break;
            }
        }
        report.note(format!(
            "totality checked by 10,000 sampled vectors (m = {m} > 16)"
        ));
    }
    report
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("backend failed during rubric compilation: {0}")]
    Backend(#[from] BackendError),
    #[error("could not parse a rubric spec from completions: {completions:?}")]
    Parse { completions: Vec<String> },
    #[error("compiled rubric failed validation: {report}\ncompletions: {completions:?}")]
    Validation {
        report: ValidationReport,
        completions: Vec<String>,
    },
}

fn compile_prompt(rubric_text: &str, m: usize, correction: Option<&str>) -> String {
    let mut prompt = String::new();
    if let Some(c) = correction {
        prompt.push_str("Your previous output was rejected: ");
        prompt.push_str(c);
        prompt.push_str("\nEmit only the corrected JSON object.\n\n");
    }
    prompt.push_str(&format!(
        "Convert the following marking rubric into a JSON scoring rule over {m} binary \
key answer element decisions. The rule counts how many decisions are Yes and awards the \
score of the first threshold met, checked from the highest min_yes downward.\n\
[Marking Rubric]: \"{rubric_text}\"\n\
Respond with exactly one JSON object of this shape and nothing else:\n\
{{\"kind\":\"count_threshold\",\"thresholds\":[{{\"min_yes\":3,\"score\":3}},{{\"min_yes\":2,\"score\":2}}],\"default_score\":0}}\n\
List thresholds in strictly descending min_yes order."
    ));
    prompt
}

/// Extract the first balanced JSON object from free-form completion text.
pub(crate) fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Compile a textual rubric into a validated count-threshold spec via the
/// backend. One retry with the failure appended, then a compile error
/// carrying the raw completions.
pub fn compile_rubric_from_text(
    rubric_text: &str,
    m: usize,
    range: ScoreRange,
    backend: &dyn Backend,
) -> Result<RubricSpec, CompileError> {
    let mut completions = Vec::new();
    let mut correction: Option<String> = None;
    for _attempt in 0..2 {
        let request = ChatRequest {
            messages: vec![ChatMessage::user(compile_prompt(
                rubric_text,
                m,
                correction.as_deref(),
            ))],
            temperature: 0.0,
            n: 1,
            max_tokens: 512,
            stop: None,
            meta: RequestMeta::class(RequestClass::RubricCompile),
        };
        let completion = backend.complete(&request)?;
        let text = completion.texts.first().cloned().unwrap_or_default();
        completions.push(text.clone());

        let parsed: Option<RubricSpec> = extract_json_object(&text)
            .and_then(|json| serde_json::from_str(json).ok());
        let Some(mut spec) = parsed else {
            correction = Some("output was not a parseable rubric JSON object".into());
            continue;
        };
        spec.set_source_text(rubric_text);
        let report = validate_rubric(&spec, m, range);
        if report.is_valid() {
            return Ok(spec);
        }
        correction = Some(format!("validation failed: {report}"));
        if _attempt == 1 {
            return Err(CompileError::Validation {
                report,
                completions,
            });
        }
    }
    Err(CompileError::Parse { completions })
}
