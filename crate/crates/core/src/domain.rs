//! Shared domain types. No I/O and no backend calls live here; everything
//! is an immutable value object once constructed.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::rubric::RubricSpec;

/// A binary key-element decision. `No` sorts before `Yes`, which is the
/// lexicographic order used for all path tie-breaks.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Decision {
    No,
    Yes,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Yes => "Yes",
            Decision::No => "No",
        }
    }

    /// Single-letter form used in decision-prefix keys ("YN…").
    pub fn letter(&self) -> char {
        match self {
            Decision::Yes => 'Y',
            Decision::No => 'N',
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Encode a decision sequence as a compact "YN…" string.
pub fn decision_prefix(decisions: &[Decision]) -> String {
    decisions.iter().map(Decision::letter).collect()
}

/// Inclusive integer mark range for a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: u32,
    pub max: u32,
}

impl ScoreRange {
    pub fn contains(&self, score: u32) -> bool {
        score >= self.min && score <= self.max
    }

    /// Number of distinct marks (the `k` of the agreement metrics).
    pub fn class_count(&self) -> usize {
        (self.max - self.min + 1) as usize
    }
}

/// Annotated example answer attached to a key element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub answer: String,
    pub decision: Decision,
}

/// One atomic fact a correct response must contain, assessed Yes/No.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyElement {
    pub id: String,
    /// The clause inserted into "Does this student answer specify …?".
    pub query: String,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentResponse {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub gold_score: Option<u32>,
}

/// Complete description of a question: prompt, ordered key elements,
/// rubric, and mark range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub id: String,
    pub prompt: String,
    pub key_elements: Vec<KeyElement>,
    pub rubric: RubricSpec,
    pub score_range: ScoreRange,
}

impl QuestionSpec {
    pub fn element_count(&self) -> usize {
        self.key_elements.len()
    }

    pub fn element_by_id(&self, id: &str) -> Option<&KeyElement> {
        self.key_elements.iter().find(|e| e.id == id)
    }

    /// Position of an element in the declared (original) order.
    pub fn element_position(&self, id: &str) -> Option<usize> {
        self.key_elements.iter().position(|e| e.id == id)
    }
}

/// One sampled decision outcome in a thought tree. `count` of the parent's
/// `n` parsed samples chose this decision; only realized outcomes
/// (count > 0) become nodes, so sibling probabilities always partition 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: u32,
    pub parent: Option<u32>,
    pub element_id: String,
    pub decision: Decision,
    pub count: u32,
    pub n: u32,
    #[serde(default)]
    pub rationale: String,
}

impl TreeNode {
    /// Exact local decision probability count/n.
    pub fn local_ratio(&self) -> BigRational {
        BigRational::new(BigInt::from(self.count), BigInt::from(self.n))
    }

    pub fn local_prob(&self) -> f64 {
        f64::from(self.count) / f64::from(self.n)
    }
}

/// A realized root-to-leaf decision vector with its probability and mark.
/// `decisions` follows the question's declared element order regardless of
/// the traversal order used while querying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentPath {
    pub decisions: Vec<Decision>,
    pub prob: f64,
    pub score: u32,
    /// Deterministic rubric mark, recorded alongside `score` when the path
    /// was scored by the backend instead of the rubric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric_score: Option<u32>,
    /// Set when a backend-produced mark fell outside the score range and
    /// was clamped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

/// Node-structured record of the per-element decision sampling for one
/// response, with the enumerated paths and the argmax-probability path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThoughtTree {
    pub response_id: String,
    pub skipped: Option<String>,
    pub nodes: Vec<TreeNode>,
    pub paths: Vec<AssessmentPath>,
    pub best_path: Option<usize>,
}

impl ThoughtTree {
    /// A tree abandoned before completion (backend refusal or decision
    /// parse exhaustion). Carries no nodes or paths.
    pub fn skipped(response_id: impl Into<String>, reason: impl Into<String>) -> Self {
        ThoughtTree {
            response_id: response_id.into(),
            skipped: Some(reason.into()),
            nodes: Vec::new(),
            paths: Vec::new(),
            best_path: None,
        }
    }

    pub fn is_skipped(&self) -> bool {
        self.skipped.is_some()
    }

    /// Root-to-leaf chains (as node indices) in construction order, which
    /// matches `paths` index for index: children were created No-first in
    /// a depth-first expansion, and that order is preserved in `nodes`.
    pub fn dfs_chains(&self) -> Vec<Vec<usize>> {
        let mut children: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            children.entry(node.parent).or_insert_with(Vec::new).push(idx);
        }
        let mut chains = Vec::new();
        let mut stack = Vec::new();
        fn walk(
            idx: usize,
            nodes: &[TreeNode],
            children: &BTreeMap<Option<u32>, Vec<usize>>,
            stack: &mut Vec<usize>,
            chains: &mut Vec<Vec<usize>>,
        ) {
            stack.push(idx);
            match children.get(&Some(nodes[idx].id)) {
                Some(kids) => {
                    for &kid in kids {
                        walk(kid, nodes, children, stack, chains);
                    }
                }
                None => chains.push(stack.clone()),
            }
            stack.pop();
        }
        if let Some(roots) = children.get(&None) {
            for &root in roots {
                walk(root, &self.nodes, &children, &mut stack, &mut chains);
            }
        }
        chains
    }

    /// Exact path probabilities (products of count/n along each chain),
    /// aligned with `paths`.
    pub fn path_ratios(&self) -> Vec<BigRational> {
        self.dfs_chains()
            .iter()
            .map(|chain| {
                chain
                    .iter()
                    .map(|&i| self.nodes[i].local_ratio())
                    .product()
            })
            .collect()
    }

    /// Structural invariant check: sibling partition at every internal
    /// node, exact probability mass 1 over paths, and per-path consistency
    /// between the stored float and the exact rational.
    pub fn check_invariants(&self, element_count: usize) -> Result<(), String> {
        if self.is_skipped() {
            return Ok(());
        }
        if self.paths.is_empty() {
            return Err("non-skipped tree has no paths".into());
        }
        let mut groups: BTreeMap<Option<u32>, (u32, u32)> = BTreeMap::new();
        for node in &self.nodes {
            if node.count == 0 || node.count > node.n {
                return Err(format!(
                    "node {} violates 0 < count <= n ({}/{})",
                    node.id, node.count, node.n
                ));
            }
            let entry = groups.entry(node.parent).or_insert((0, node.n));
            if entry.1 != node.n {
                return Err(format!(
                    "siblings under {:?} disagree on n ({} vs {})",
                    node.parent, entry.1, node.n
                ));
            }
            entry.0 += node.count;
        }
        for (parent, (sum, n)) in &groups {
            if sum != n {
                return Err(format!(
                    "sibling counts under {:?} sum to {} of {}",
                    parent, sum, n
                ));
            }
        }
        let ratios = self.path_ratios();
        if ratios.len() != self.paths.len() {
            return Err(format!(
                "{} chains vs {} paths",
                ratios.len(),
                self.paths.len()
            ));
        }
        let total: BigRational = ratios.iter().cloned().sum();
        if !total.is_one() {
            return Err(format!("path probabilities sum to {total}, not 1"));
        }
        for (i, (path, ratio)) in self.paths.iter().zip(&ratios).enumerate() {
            if path.decisions.len() != element_count {
                return Err(format!(
                    "path {} has {} decisions, expected {}",
                    i,
                    path.decisions.len(),
                    element_count
                ));
            }
            let exact = ratio.to_f64().unwrap_or(f64::NAN);
            if (path.prob - exact).abs() > 1e-9 {
                return Err(format!(
                    "path {} stored prob {} differs from exact {}",
                    i, path.prob, exact
                ));
            }
        }
        match self.best_path {
            Some(b) if b < self.paths.len() => Ok(()),
            other => Err(format!("best_path {:?} out of range", other)),
        }
    }
}

/// Chat roles shared by backend requests and SFT records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }
}

/// Parsed summarization output for one path: the mark restated by the
/// summarizer (enforced equal to the path score), the response-level
/// rationale, and an improvement suggestion (empty at full marks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleBundle {
    pub mark: u32,
    pub rationale: String,
    pub suggestion: String,
    pub source_path_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub response_id: String,
    pub path_score: u32,
    pub gold: u32,
}

/// Multi-round chat training record: a rationale round, plus a suggestion
/// round only when the mark is below the maximum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<ChatMessage>,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefMeta {
    pub response_id: String,
    pub gold: u32,
    pub rejected_score: u32,
}

/// Preference pair: `chosen` comes from a path scoring the gold mark,
/// `rejected` from a path that scored differently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: PrefMeta,
}

/// Rationale-to-mark supervision record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub rationale: String,
    pub mark: u32,
}

/// Report-style validation outcome: an empty violation list means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violation(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }

    pub fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
        self.notes.extend(other.notes);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "valid")?;
        } else {
            for v in &self.violations {
                writeln!(f, "violation: {v}")?;
            }
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

/// Validate a question spec: element ids unique, elements non-empty, mark
/// range sane, and the rubric total and in range for this element count.
pub fn validate_question_spec(spec: &QuestionSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    if spec.key_elements.is_empty() {
        report.violation("key_elements must be non-empty");
    }
    let mut seen = std::collections::BTreeSet::new();
    for element in &spec.key_elements {
        if !seen.insert(element.id.as_str()) {
            report.violation(format!("duplicate key element id '{}'", element.id));
        }
    }
    if spec.score_range.max <= spec.score_range.min {
        report.violation(format!(
            "score_range max {} must exceed min {}",
            spec.score_range.max, spec.score_range.min
        ));
    }
    report.merge(crate::rubric::validate_rubric(
        &spec.rubric,
        spec.key_elements.len(),
        spec.score_range,
    ));
    report
}
