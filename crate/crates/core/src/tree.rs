//! Thought-tree construction: per-node decision sampling, element
//! rationale queries, depth-first path enumeration, rubric scoring, and
//! best-path selection.
//!
//! The tree for one response is expanded depth-first. At each node the
//! next element's decision distribution is sampled (n candidates,
//! conditioned on the path so far according to the history mode); children
//! exist only for realized outcomes, so sibling probabilities partition 1
//! exactly and the path probabilities — products of count/n along each
//! chain — always sum to 1.

use std::cmp::Ordering;
use std::collections::HashMap;

use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatRequest};
use crate::domain::{
    AssessmentPath, Decision, KeyElement, QuestionSpec, StudentResponse, ThoughtTree, TreeNode,
};
use crate::prompt::{
    render_decision_prompt, render_rationale_prompt, render_score_sum_prompt, ElementOrder,
    HistoryMode, PromptConfig, SamplingParams, ScoreMode,
};
use crate::rubric::{evaluate_rubric, RubricError};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("decision parse failed for element {element_id}: only {parsed} of {requested} candidates parsed")]
    DecisionParse {
        element_id: String,
        parsed: u32,
        requested: u32,
    },
    #[error("backend refused: {0}")]
    Refusal(String),
    #[error("backend error: {0}")]
    Backend(BackendError),
    #[error("rubric error: {0}")]
    Rubric(#[from] RubricError),
    #[error("tree is skipped: {0}")]
    Skipped(String),
    #[error("{0}")]
    Contract(String),
}

impl From<BackendError> for TreeError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Refusal(msg) => TreeError::Refusal(msg),
            other => TreeError::Backend(other),
        }
    }
}

impl TreeError {
    /// Errors that skip one response rather than aborting the run.
    fn skip_reason(&self) -> Option<String> {
        match self {
            TreeError::Refusal(msg) => Some(format!("refusal: {msg}")),
            TreeError::DecisionParse {
                element_id, parsed, ..
            } => Some(format!(
                "decision_parse: element {element_id} parsed {parsed} < 3"
            )),
            _ => None,
        }
    }
}

/// Per-tree query accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    /// Element-level sampling events (memoized repeats not counted).
    pub decision_queries: u32,
    /// Unique (element, decision) rationale queries.
    pub rationale_queries: u32,
    pub score_queries: u32,
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub tree: ThoughtTree,
    pub stats: BuildStats,
}

/// Sampled Yes/No counts for one element query after normalization,
/// one batched re-query of unparseable candidates, and renormalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionSample {
    pub yes: u32,
    pub no: u32,
}

impl DecisionSample {
    pub fn parsed_n(&self) -> u32 {
        self.yes + self.no
    }

    fn count(&self, decision: Decision) -> u32 {
        match decision {
            Decision::Yes => self.yes,
            Decision::No => self.no,
        }
    }
}

/// Normalize one candidate: trim, case-fold, strip punctuation, take the
/// first token. Only exact "yes"/"no" tokens parse.
pub fn normalize_candidate(text: &str) -> Option<Decision> {
    let cleaned: String = text
        .trim()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    match cleaned.split_whitespace().next() {
        Some("yes") => Some(Decision::Yes),
        Some("no") => Some(Decision::No),
        _ => None,
    }
}

fn tally(texts: &[String]) -> (u32, u32, u32) {
    let mut yes = 0;
    let mut no = 0;
    let mut bad = 0;
    for text in texts {
        match normalize_candidate(text) {
            Some(Decision::Yes) => yes += 1,
            Some(Decision::No) => no += 1,
            None => bad += 1,
        }
    }
    (yes, no, bad)
}

/// Sample one element's decision distribution. Unparseable candidates are
/// re-queried once as a batch; candidates still unparseable are dropped
/// and probabilities renormalize over the parsed count. Fewer than 3
/// parsed candidates fails the query.
pub fn sample_element_decision(
    request: &ChatRequest,
    backend: &dyn Backend,
) -> Result<DecisionSample, TreeError> {
    let completion = backend.complete(request)?;
    let (mut yes, mut no, bad) = tally(&completion.texts);
    if bad > 0 {
        let mut retry = request.clone();
        retry.n = bad;
        let completion = backend.complete(&retry)?;
        let (more_yes, more_no, _) = tally(&completion.texts);
        yes += more_yes;
        no += more_no;
    }
    let sample = DecisionSample { yes, no };
    if sample.parsed_n() < 3 {
        return Err(TreeError::DecisionParse {
            element_id: request
                .meta
                .element_id
                .clone()
                .unwrap_or_else(|| "?".into()),
            parsed: sample.parsed_n(),
            requested: request.n,
        });
    }
    Ok(sample)
}

/// Fetch the free-text justification for one realized decision outcome.
pub fn query_element_rationale(
    question: &QuestionSpec,
    element: &KeyElement,
    response: &StudentResponse,
    decision: Decision,
    config: &PromptConfig,
    sampling: &SamplingParams,
    backend: &dyn Backend,
) -> Result<String, TreeError> {
    let request = render_rationale_prompt(question, element, response, decision, config, sampling);
    let completion = backend.complete(&request)?;
    Ok(completion.texts.into_iter().next().unwrap_or_default())
}

/// Order of `(exact probability desc, decision vector asc)` used for the
/// argmax of best-path selection; `No < Yes`, smallest vector first.
fn better_path(
    a: (&BigRational, &[Decision]),
    b: (&BigRational, &[Decision]),
) -> Ordering {
    b.0.cmp(a.0).then_with(|| a.1.cmp(b.1))
}

pub(crate) fn argmax_path(ratios: &[BigRational], paths: &[AssessmentPath]) -> usize {
    let mut best = 0;
    for i in 1..paths.len() {
        if better_path(
            (&ratios[i], &paths[i].decisions),
            (&ratios[best], &paths[best].decisions),
        ) == Ordering::Less
        {
            best = i;
        }
    }
    best
}

/// Select the argmax-probability path index under the deterministic
/// tie-break. Probabilities are compared as exact rationals recomputed
/// from the node counts.
pub fn select_best_path(tree: &ThoughtTree) -> Result<usize, TreeError> {
    if let Some(reason) = &tree.skipped {
        return Err(TreeError::Skipped(reason.clone()));
    }
    let ratios = tree.path_ratios();
    if ratios.len() != tree.paths.len() || tree.paths.is_empty() {
        return Err(TreeError::Contract(format!(
            "tree has {} chains but {} paths",
            ratios.len(),
            tree.paths.len()
        )));
    }
    Ok(argmax_path(&ratios, &tree.paths))
}

struct Builder<'a> {
    question: &'a QuestionSpec,
    response: &'a StudentResponse,
    config: &'a PromptConfig,
    sampling: &'a SamplingParams,
    backend: &'a dyn Backend,
    /// Element indices in traversal order.
    order: Vec<usize>,
    nodes: Vec<TreeNode>,
    paths: Vec<AssessmentPath>,
    ratios: Vec<BigRational>,
    decision_memo: HashMap<(usize, String), DecisionSample>,
    rationale_memo: HashMap<(usize, Decision), String>,
    stats: BuildStats,
}

impl<'a> Builder<'a> {
    fn prefix_key(&self, prefix: &[(usize, Decision)]) -> String {
        match self.config.history_mode {
            HistoryMode::NoHistory => String::new(),
            _ => prefix.iter().map(|(_, d)| d.letter()).collect(),
        }
    }

    fn sample(
        &mut self,
        element_idx: usize,
        prefix: &[(usize, Decision)],
    ) -> Result<DecisionSample, TreeError> {
        let key = (element_idx, self.prefix_key(prefix));
        if let Some(sample) = self.decision_memo.get(&key) {
            return Ok(*sample);
        }
        let history: Vec<(&KeyElement, Decision)> = match self.config.history_mode {
            HistoryMode::NoHistory => Vec::new(),
            _ => prefix
                .iter()
                .map(|(idx, d)| (&self.question.key_elements[*idx], *d))
                .collect(),
        };
        let request = render_decision_prompt(
            self.question,
            &self.question.key_elements[element_idx],
            self.response,
            &history,
            self.config,
            self.sampling,
        );
        let sample = sample_element_decision(&request, self.backend)?;
        self.stats.decision_queries += 1;
        self.decision_memo.insert(key, sample);
        Ok(sample)
    }

    fn rationale(
        &mut self,
        element_idx: usize,
        decision: Decision,
    ) -> Result<String, TreeError> {
        if let Some(text) = self.rationale_memo.get(&(element_idx, decision)) {
            return Ok(text.clone());
        }
        let text = query_element_rationale(
            self.question,
            &self.question.key_elements[element_idx],
            self.response,
            decision,
            self.config,
            self.sampling,
            self.backend,
        )?;
        self.stats.rationale_queries += 1;
        self.rationale_memo
            .insert((element_idx, decision), text.clone());
        Ok(text)
    }

    fn score_path(&mut self, decisions: &[Decision]) -> Result<AssessmentPath, TreeError> {
        let rubric_score = evaluate_rubric(&self.question.rubric, decisions)?;
        match self.config.score_mode {
            ScoreMode::DeterministicRubric => Ok(AssessmentPath {
                decisions: decisions.to_vec(),
                prob: 0.0,
                score: rubric_score,
                rubric_score: None,
                clamped: false,
            }),
            ScoreMode::SumByLlm => {
                let by_element: Vec<(&KeyElement, Decision)> = self
                    .question
                    .key_elements
                    .iter()
                    .zip(decisions.iter().copied())
                    .collect();
                let request =
                    render_score_sum_prompt(self.question, self.response, &by_element);
                let completion = self.backend.complete(&request)?;
                self.stats.score_queries += 1;
                let text = completion.texts.first().cloned().unwrap_or_default();
                let raw: i64 = first_integer(&text).ok_or_else(|| TreeError::DecisionParse {
                    element_id: "score_sum".into(),
                    parsed: 0,
                    requested: 1,
                })?;
                let range = self.question.score_range;
                let clamped_score = raw.clamp(i64::from(range.min), i64::from(range.max)) as u32;
                Ok(AssessmentPath {
                    decisions: decisions.to_vec(),
                    prob: 0.0,
                    score: clamped_score,
                    rubric_score: Some(rubric_score),
                    clamped: i64::from(clamped_score) != raw,
                })
            }
        }
    }

    fn expand(
        &mut self,
        depth: usize,
        prefix: &mut Vec<(usize, Decision)>,
        parent: Option<u32>,
        ratio: BigRational,
    ) -> Result<(), TreeError> {
        let m = self.order.len();
        if depth == m {
            // Leaf: report decisions in the question's declared order.
            let mut decisions = vec![Decision::No; m];
            for (idx, decision) in prefix.iter() {
                decisions[*idx] = *decision;
            }
            let mut path = self.score_path(&decisions)?;
            path.prob = ratio.to_f64().unwrap_or(0.0);
            self.paths.push(path);
            self.ratios.push(ratio);
            return Ok(());
        }
        let element_idx = self.order[depth];
        let sample = self.sample(element_idx, prefix)?;
        let n = sample.parsed_n();
        for decision in [Decision::No, Decision::Yes] {
            let count = sample.count(decision);
            if count == 0 {
                continue;
            }
            let rationale = self.rationale(element_idx, decision)?;
            let node_id = self.nodes.len() as u32;
            self.nodes.push(TreeNode {
                id: node_id,
                parent,
                element_id: self.question.key_elements[element_idx].id.clone(),
                decision,
                count,
                n,
                rationale,
            });
            prefix.push((element_idx, decision));
            let child_ratio = &ratio * self.nodes[node_id as usize].local_ratio();
            self.expand(depth + 1, prefix, Some(node_id), child_ratio)?;
            prefix.pop();
        }
        Ok(())
    }
}

fn first_integer(text: &str) -> Option<i64> {
    let mut digits = String::new();
    for c in text.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            break;
        }
    }
    digits.parse().ok()
}

/// Build the thought tree for one response. Refusals and decision-parse
/// exhaustion yield a skipped tree; transport, configuration, and budget
/// failures propagate as errors.
pub fn build_thought_tree(
    question: &QuestionSpec,
    response: &StudentResponse,
    config: &PromptConfig,
    sampling: &SamplingParams,
    backend: &dyn Backend,
) -> Result<BuildOutcome, TreeError> {
    let m = question.key_elements.len();
    if m == 0 {
        return Err(TreeError::Contract("question has no key elements".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    if let ElementOrder::Shuffled { seed } = config.element_order {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }

    let mut builder = Builder {
        question,
        response,
        config,
        sampling,
        backend,
        order,
        nodes: Vec::new(),
        paths: Vec::new(),
        ratios: Vec::new(),
        decision_memo: HashMap::new(),
        rationale_memo: HashMap::new(),
        stats: BuildStats::default(),
    };

    let mut prefix = Vec::with_capacity(m);
    match builder.expand(0, &mut prefix, None, BigRational::one()) {
        Ok(()) => {
            let total: BigRational = builder.ratios.iter().cloned().sum();
            debug_assert!(total.is_one(), "path mass must be exactly 1, got {total}");
            let best = argmax_path(&builder.ratios, &builder.paths);
            Ok(BuildOutcome {
                tree: ThoughtTree {
                    response_id: response.id.clone(),
                    skipped: None,
                    nodes: builder.nodes,
                    paths: builder.paths,
                    best_path: Some(best),
                },
                stats: builder.stats,
            })
        }
        Err(e) => match e.skip_reason() {
            Some(reason) => Ok(BuildOutcome {
                tree: ThoughtTree::skipped(&response.id, reason),
                stats: builder.stats,
            }),
            None => Err(e),
        },
    }
}

/// Build trees for many responses on a bounded worker pool, preserving
/// input order. Each entry is independent; mock streams are keyed by
/// request content, so scheduling cannot change any outcome.
pub fn build_trees_parallel(
    question: &QuestionSpec,
    responses: &[StudentResponse],
    config: &PromptConfig,
    sampling: &SamplingParams,
    backend: &(dyn Backend + Sync),
    workers: usize,
) -> Vec<Result<BuildOutcome, TreeError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| {
        responses
            .par_iter()
            .map(|response| build_thought_tree(question, response, config, sampling, backend))
            .collect()
    })
}
