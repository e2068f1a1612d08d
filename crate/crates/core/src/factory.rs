//! Dataset factory: summarizes tree paths into response-level rationales
//! and assembles SFT, preference-pair, and rationale-to-score records.
//!
//! Per response, the paths summarized are the SFT-selected path (argmin
//! |score − gold|), every path scoring the gold mark, and every other path
//! with probability at least `p_min`. A summary whose restated mark
//! disagrees with the path score is retried once with a correction
//! preamble and then rejected. When several paths score the gold mark,
//! one rationale is adjudicated and the rest are discarded from all
//! datasets.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use num_rational::BigRational;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::domain::{
    Decision, KeyElement, PrefMeta, PreferencePair, QuestionSpec, RationaleBundle, ScoreRecord,
    SftMeta, SftRecord, StudentResponse, ThoughtTree,
};
use crate::prompt::{
    render_adjudication_prompt, render_sft_round1, render_summarization_prompt, SamplingParams,
    SummaryItem, RATIONALE_INSTRUCTIONS, SUGGESTION_INSTRUCTIONS,
};

#[derive(Debug, Error)]
pub enum FactoryError {
    #[error("path {path_index} rejected: {reason}")]
    PathRejected { path_index: usize, reason: String },
    #[error("backend error: {0}")]
    Backend(BackendError),
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjudicationMode {
    /// Deterministic: the correct path with the highest probability wins.
    #[default]
    MaxProbability,
    /// The backend picks among the correct-path rationales by index.
    Llm,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FactoryConfig {
    /// Paths below this probability are not summarized unless they score
    /// the gold mark or are the SFT selection.
    pub p_min: f64,
    pub adjudication: AdjudicationMode,
    pub seed: u64,
}

impl Default for FactoryConfig {
    fn default() -> Self {
        FactoryConfig {
            p_min: 0.01,
            adjudication: AdjudicationMode::MaxProbability,
            seed: 0,
        }
    }
}

/// Everything needed to summarize one path: the element decisions and
/// rationales along its chain in the question's declared element order.
pub struct SummarizationRequest<'a> {
    pub question: &'a QuestionSpec,
    pub response: &'a StudentResponse,
    pub path_index: usize,
    pub items: Vec<SummaryItem<'a>>,
    pub decisions: &'a [Decision],
    pub score: u32,
}

impl<'a> SummarizationRequest<'a> {
    pub fn for_path(
        question: &'a QuestionSpec,
        response: &'a StudentResponse,
        tree: &'a ThoughtTree,
        chain: &[usize],
        path_index: usize,
    ) -> Result<Self, FactoryError> {
        let path = tree
            .paths
            .get(path_index)
            .ok_or_else(|| FactoryError::Contract(format!("no path {path_index}")))?;
        let mut by_position: Vec<(usize, &KeyElement, Decision, &str)> = Vec::new();
        for &node_idx in chain {
            let node = &tree.nodes[node_idx];
            let position = question.element_position(&node.element_id).ok_or_else(|| {
                FactoryError::Contract(format!("unknown element id {}", node.element_id))
            })?;
            let element = &question.key_elements[position];
            by_position.push((position, element, node.decision, node.rationale.as_str()));
        }
        by_position.sort_by_key(|(position, ..)| *position);
        if by_position.len() != question.key_elements.len() {
            return Err(FactoryError::Contract(format!(
                "path {} covers {} of {} elements",
                path_index,
                by_position.len(),
                question.key_elements.len()
            )));
        }
        Ok(SummarizationRequest {
            question,
            response,
            path_index,
            items: by_position
                .into_iter()
                .map(|(_, element, decision, rationale)| SummaryItem {
                    element,
                    decision,
                    rationale,
                })
                .collect(),
            decisions: &path.decisions,
            score: path.score,
        })
    }
}

#[derive(Deserialize)]
struct RawBundle {
    mark: serde_json::Value,
    rationale: String,
    #[serde(default)]
    suggestion: String,
}

fn parse_mark(value: &serde_json::Value) -> Option<i64> {
    match value {
        serde_json::Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_bundle(text: &str) -> Result<(i64, String, String), String> {
    let json = crate::rubric::extract_json_object(text)
        .ok_or_else(|| "no JSON object in completion".to_string())?;
    let raw: RawBundle =
        serde_json::from_str(json).map_err(|e| format!("bundle JSON invalid: {e}"))?;
    let mark = parse_mark(&raw.mark).ok_or_else(|| "mark is not an integer".to_string())?;
    Ok((mark, raw.rationale, raw.suggestion))
}

/// Summarize one path into a mark/rationale/suggestion bundle, enforcing
/// mark == path score with a single correction retry.
pub fn summarize_path_rationale(
    req: &SummarizationRequest<'_>,
    sampling: &SamplingParams,
    backend: &dyn Backend,
) -> Result<RationaleBundle, FactoryError> {
    let mut correction: Option<String> = None;
    for _attempt in 0..2 {
        let request = render_summarization_prompt(
            req.question,
            req.response,
            &req.items,
            req.score,
            req.decisions,
            sampling,
            correction.as_deref(),
        );
        let completion = match backend.complete(&request) {
            Ok(c) => c,
            Err(BackendError::Refusal(msg)) => {
                return Err(FactoryError::PathRejected {
                    path_index: req.path_index,
                    reason: format!("refusal: {msg}"),
                })
            }
            Err(e) => return Err(FactoryError::Backend(e)),
        };
        let text = completion.texts.first().cloned().unwrap_or_default();
        match parse_bundle(&text) {
            Ok((mark, rationale, suggestion)) if mark == i64::from(req.score) => {
                let mark = req.score;
                let suggestion = if mark == req.question.score_range.max {
                    String::new()
                } else {
                    suggestion
                };
                return Ok(RationaleBundle {
                    mark,
                    rationale,
                    suggestion,
                    source_path_index: req.path_index,
                });
            }
            Ok((mark, ..)) => {
                correction = Some(format!(
                    "the \"mark\" was {mark} but must equal the assessed score {}",
                    req.score
                ));
            }
            Err(reason) => correction = Some(reason),
        }
    }
    Err(FactoryError::PathRejected {
        path_index: req.path_index,
        reason: correction.unwrap_or_else(|| "summary rejected".into()),
    })
}

fn score_diff(score: u32, gold: u32) -> u32 {
    score.abs_diff(gold)
}

/// The path whose score is closest to the gold mark; ties prefer the
/// higher-probability path, then the lexicographically smallest decision
/// vector (No < Yes).
pub fn select_sft_path(tree: &ThoughtTree, gold: u32) -> Result<usize, FactoryError> {
    if tree.is_skipped() {
        return Err(FactoryError::Contract("tree is skipped".into()));
    }
    if tree.paths.is_empty() {
        return Err(FactoryError::Contract("tree has no paths".into()));
    }
    let ratios = tree.path_ratios();
    Ok(argmin_sft(&tree.paths, &ratios, gold))
}

fn argmin_sft(
    paths: &[crate::domain::AssessmentPath],
    ratios: &[BigRational],
    gold: u32,
) -> usize {
    let better = |i: usize, j: usize| -> bool {
        let di = score_diff(paths[i].score, gold);
        let dj = score_diff(paths[j].score, gold);
        match di.cmp(&dj) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => match ratios[i].cmp(&ratios[j]) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => paths[i].decisions < paths[j].decisions,
            },
        }
    };
    let mut best = 0;
    for i in 1..paths.len() {
        if better(i, best) {
            best = i;
        }
    }
    best
}

/// Pick one rationale among paths that all scored the gold mark. Returns
/// the winning path index and whether an LLM adjudication fell back to
/// the probability rule.
pub fn adjudicate_correct_paths(
    question: &QuestionSpec,
    response: &StudentResponse,
    tree: &ThoughtTree,
    ratios: &[BigRational],
    correct: &[usize],
    bundles: &BTreeMap<usize, RationaleBundle>,
    mode: AdjudicationMode,
    backend: &dyn Backend,
) -> Result<(usize, bool), FactoryError> {
    if correct.is_empty() {
        return Err(FactoryError::Contract("no correct-path bundles".into()));
    }
    if correct.len() == 1 {
        return Ok((correct[0], false));
    }
    let by_probability = || -> usize {
        let mut best = correct[0];
        for &i in &correct[1..] {
            let ord = ratios[i]
                .cmp(&ratios[best])
                .then_with(|| tree.paths[best].decisions.cmp(&tree.paths[i].decisions));
            if ord == Ordering::Greater {
                best = i;
            }
        }
        best
    };
    match mode {
        AdjudicationMode::MaxProbability => Ok((by_probability(), false)),
        AdjudicationMode::Llm => {
            let rationales: Vec<&str> = correct
                .iter()
                .map(|i| bundles[i].rationale.as_str())
                .collect();
            let mut note = None;
            for _attempt in 0..2 {
                let request = render_adjudication_prompt(question, response, &rationales, note);
                let completion = match backend.complete(&request) {
                    Ok(c) => c,
                    Err(BackendError::Refusal(_)) => break,
                    Err(e) => return Err(FactoryError::Backend(e)),
                };
                let text = completion.texts.first().cloned().unwrap_or_default();
                if let Some(choice) = first_index(&text, rationales.len()) {
                    return Ok((correct[choice - 1], false));
                }
                note = Some("Your previous answer was not a valid index.");
            }
            Ok((by_probability(), true))
        }
    }
}

fn first_index(text: &str, len: usize) -> Option<usize> {
    let digits: String = text
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let value: usize = digits.parse().ok()?;
    (value >= 1 && value <= len).then_some(value)
}

fn derive_seed(seed: u64, label: &str, response_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(response_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn instruction_draws(seed: u64, response_id: &str) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sft-instructions", response_id));
    let rationale = rng.random_range(0..RATIONALE_INSTRUCTIONS.len());
    let suggestion = rng.random_range(0..SUGGESTION_INSTRUCTIONS.len());
    (rationale, suggestion)
}

/// The first-round user content for a response under a given seed. Shared
/// by the SFT record and its preference pairs.
pub fn sft_round1_prompt(question: &QuestionSpec, response: &StudentResponse, seed: u64) -> String {
    let (rationale_idx, _) = instruction_draws(seed, &response.id);
    render_sft_round1(RATIONALE_INSTRUCTIONS[rationale_idx], question, response)
}

/// Assemble the multi-round SFT record: a rationale round always, a
/// suggestion round only below full marks. Instruction draws are seeded
/// per response for reproducibility.
pub fn build_sft_records(
    question: &QuestionSpec,
    response: &StudentResponse,
    bundle: &RationaleBundle,
    gold: u32,
    seed: u64,
) -> SftRecord {
    let (_, suggestion_idx) = instruction_draws(seed, &response.id);
    let mut messages = vec![
        crate::domain::ChatMessage::user(sft_round1_prompt(question, response, seed)),
        crate::domain::ChatMessage::assistant(bundle.rationale.clone()),
    ];
    if bundle.mark < question.score_range.max {
        messages.push(crate::domain::ChatMessage::user(
            SUGGESTION_INSTRUCTIONS[suggestion_idx],
        ));
        messages.push(crate::domain::ChatMessage::assistant(
            bundle.suggestion.clone(),
        ));
    }
    SftRecord {
        messages,
        meta: SftMeta {
            response_id: response.id.clone(),
            path_score: bundle.mark,
            gold,
        },
    }
}

/// One preference pair per incorrect bundle, all sharing the adjudicated
/// correct rationale as `chosen`.
pub fn build_preference_pairs(
    question: &QuestionSpec,
    response: &StudentResponse,
    gold: u32,
    chosen: &RationaleBundle,
    incorrect: &[&RationaleBundle],
    seed: u64,
) -> Vec<PreferencePair> {
    debug_assert_eq!(chosen.mark, gold);
    let prompt = sft_round1_prompt(question, response, seed);
    incorrect
        .iter()
        .filter(|b| b.mark != gold)
        .map(|bundle| PreferencePair {
            prompt: prompt.clone(),
            chosen: chosen.rationale.clone(),
            rejected: bundle.rationale.clone(),
            meta: PrefMeta {
                response_id: response.id.clone(),
                gold,
                rejected_score: bundle.mark,
            },
        })
        .collect()
}

/// Rationale-text-to-mark projection of the emitted bundles.
pub fn build_rationale_to_score(bundles: &[&RationaleBundle]) -> Vec<ScoreRecord> {
    bundles
        .iter()
        .map(|b| ScoreRecord {
            rationale: b.rationale.clone(),
            mark: b.mark,
        })
        .collect()
}

/// Everything one response contributes to the datasets.
#[derive(Debug, Default)]
pub struct ResponseSynthesis {
    pub sft: Option<SftRecord>,
    pub pairs: Vec<PreferencePair>,
    pub score_records: Vec<ScoreRecord>,
    pub rejected_paths: u32,
    pub adjudication_fallback: bool,
}

/// Run Stage 2 for one non-skipped tree whose response has a gold mark.
pub fn synthesize_response(
    question: &QuestionSpec,
    response: &StudentResponse,
    tree: &ThoughtTree,
    config: &FactoryConfig,
    sampling: &SamplingParams,
    backend: &dyn Backend,
) -> Result<ResponseSynthesis, FactoryError> {
    if tree.is_skipped() {
        return Err(FactoryError::Contract("tree is skipped".into()));
    }
    let gold = response
        .gold_score
        .ok_or_else(|| FactoryError::Contract("response has no gold score".into()))?;

    let ratios = tree.path_ratios();
    let chains = tree.dfs_chains();
    let sft_idx = select_sft_path(tree, gold)?;

    let mut to_summarize: BTreeSet<usize> = BTreeSet::new();
    to_summarize.insert(sft_idx);
    for (i, path) in tree.paths.iter().enumerate() {
        if path.score == gold || path.prob >= config.p_min {
            to_summarize.insert(i);
        }
    }

    let mut out = ResponseSynthesis::default();
    let mut bundles: BTreeMap<usize, RationaleBundle> = BTreeMap::new();
    for &idx in &to_summarize {
        let req = SummarizationRequest::for_path(question, response, tree, &chains[idx], idx)?;
        match summarize_path_rationale(&req, sampling, backend) {
            Ok(bundle) => {
                bundles.insert(idx, bundle);
            }
            Err(FactoryError::PathRejected { .. }) => out.rejected_paths += 1,
            Err(e) => return Err(e),
        }
    }

    let correct: Vec<usize> = bundles
        .keys()
        .copied()
        .filter(|i| tree.paths[*i].score == gold)
        .collect();

    let chosen_correct: Option<usize> = if correct.is_empty() {
        None
    } else {
        let (winner, fallback) = adjudicate_correct_paths(
            question,
            response,
            tree,
            &ratios,
            &correct,
            &bundles,
            config.adjudication,
            backend,
        )?;
        out.adjudication_fallback = fallback;
        Some(winner)
    };

    let sft_bundle = chosen_correct
        .and_then(|i| bundles.get(&i))
        .or_else(|| bundles.get(&sft_idx));
    if let Some(bundle) = sft_bundle {
        out.sft = Some(build_sft_records(
            question,
            response,
            bundle,
            gold,
            config.seed,
        ));
    }

    let incorrect: Vec<&RationaleBundle> = bundles
        .values()
        .filter(|b| b.mark != gold)
        .collect();

    if let Some(winner) = chosen_correct {
        out.pairs = build_preference_pairs(
            question,
            response,
            gold,
            &bundles[&winner],
            &incorrect,
            config.seed,
        );
    }

    let mut emitted: Vec<&RationaleBundle> = Vec::new();
    if let Some(winner) = chosen_correct {
        emitted.push(&bundles[&winner]);
    }
    emitted.extend(incorrect.iter().copied());
    emitted.sort_by_key(|b| b.source_path_index);
    out.score_records = build_rationale_to_score(&emitted);

    Ok(out)
}
