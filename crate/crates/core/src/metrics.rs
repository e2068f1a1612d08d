//! Evaluation metrics: accuracy, macro-F1 over the full score range,
//! quadratic weighted kappa, the correct ratio over thought trees,
//! pattern-based mark extraction from free-form rationales, and dataset
//! statistics.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::domain::{ScoreRange, ThoughtTree};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold and predictions differ in length ({gold} vs {pred})")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("label lists must be non-empty")]
    Empty,
    #[error("label {label} outside 0..{k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("k must be >= 2, got {0}")]
    BadK(usize),
    #[error("kappa undefined: all weighted expected agreement is zero")]
    UndefinedKappa,
    #[error("correct ratio undefined: every tree is skipped")]
    AllSkipped,
    #[error("no in-range mark found in rationale")]
    NoMark,
}

/// Squared-distance disagreement weight (i − j)² / (k − 1)².
pub fn quadratic_weight(i: usize, j: usize, k: usize) -> f64 {
    let d = i.abs_diff(j) as f64;
    let span = (k - 1) as f64;
    (d * d) / (span * span)
}

fn check_labels(gold: &[usize], pred: &[usize], k: usize) -> Result<(), MetricsError> {
    if k < 2 {
        return Err(MetricsError::BadK(k));
    }
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    for &label in gold.iter().chain(pred) {
        if label >= k {
            return Err(MetricsError::LabelOutOfRange { label, k });
        }
    }
    Ok(())
}

/// k×k observed histogram with gold on rows and predictions on columns.
pub fn confusion_matrix(gold: &[usize], pred: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut matrix = vec![vec![0u64; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        matrix[g][p] += 1;
    }
    matrix
}

/// Chance-corrected agreement with squared-distance penalties:
/// κ = 1 − (Σ w·O) / (Σ w·E), E the outer product of the marginals scaled
/// to the same mass as O. The histogram spans the full range even for
/// absent classes.
pub fn quadratic_weighted_kappa(
    gold: &[usize],
    pred: &[usize],
    k: usize,
) -> Result<f64, MetricsError> {
    check_labels(gold, pred, k)?;
    let observed = confusion_matrix(gold, pred, k);
    let n = gold.len() as f64;
    let mut gold_marginal = vec![0u64; k];
    let mut pred_marginal = vec![0u64; k];
    for (i, row) in observed.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            gold_marginal[i] += count;
            pred_marginal[j] += count;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = quadratic_weight(i, j, k);
            num += w * observed[i][j] as f64;
            den += w * (gold_marginal[i] * pred_marginal[j]) as f64 / n;
        }
    }
    if den == 0.0 {
        return Err(MetricsError::UndefinedKappa);
    }
    Ok(1.0 - num / den)
}

/// Exact-match accuracy and macro-F1 averaged over all k classes of the
/// score range; classes with no support and no predictions contribute 0.
pub fn accuracy_macro_f1(
    gold: &[usize],
    pred: &[usize],
    k: usize,
) -> Result<(f64, f64, Vec<Vec<u64>>), MetricsError> {
    check_labels(gold, pred, k)?;
    let confusion = confusion_matrix(gold, pred, k);
    let n = gold.len() as f64;
    let hits: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let accuracy = hits as f64 / n;
    let mut f1_sum = 0.0;
    for class in 0..k {
        let tp = confusion[class][class];
        let fp: u64 = (0..k).filter(|&i| i != class).map(|i| confusion[i][class]).sum();
        let fn_: u64 = (0..k).filter(|&j| j != class).map(|j| confusion[class][j]).sum();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok((accuracy, f1_sum / k as f64, confusion))
}

/// Fraction of non-skipped trees containing at least one path whose score
/// equals the gold mark. `golds` aligns with `trees` by index.
pub fn correct_ratio(trees: &[ThoughtTree], golds: &[u32]) -> Result<f64, MetricsError> {
    if trees.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            gold: golds.len(),
            pred: trees.len(),
        });
    }
    let mut considered = 0u64;
    let mut containing = 0u64;
    for (tree, &gold) in trees.iter().zip(golds) {
        if tree.is_skipped() {
            continue;
        }
        considered += 1;
        if tree.paths.iter().any(|p| p.score == gold) {
            containing += 1;
        }
    }
    if considered == 0 {
        return Err(MetricsError::AllSkipped);
    }
    Ok(containing as f64 / considered as f64)
}

fn word_to_number(word: &str) -> Option<u32> {
    Some(match word {
        "zero" => 0,
        "one" => 1,
        "two" => 2,
        "three" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        "ten" => 10,
        _ => return None,
    })
}

fn parse_number(token: &str) -> Option<u32> {
    token
        .parse()
        .ok()
        .or_else(|| word_to_number(&token.to_lowercase()))
}

const NUMBER: &str = r"(\d+|zero|one|two|three|four|five|six|seven|eight|nine|ten)";

fn mark_patterns() -> &'static [Regex; 4] {
    static PATTERNS: OnceLock<[Regex; 4]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            Regex::new(&format!(r"(?i)scored\s+{NUMBER}\s+points?")).unwrap(),
            Regex::new(&format!(r"(?i)score\s+of\s+{NUMBER}")).unwrap(),
            Regex::new(&format!(r"(?i)award(?:s|ed)?\s+{NUMBER}\s+points?")).unwrap(),
            Regex::new(&format!(r"(?i)^\s*{NUMBER}\s+points?\s*;")).unwrap(),
        ]
    })
}

/// Scan a free-form rationale for its stated mark. Candidate matches from
/// all patterns are considered in order of position; the first whose
/// value lies within the score range wins.
pub fn extract_mark(rationale: &str, range: ScoreRange) -> Result<u32, MetricsError> {
    let mut candidates: Vec<(usize, u32)> = Vec::new();
    for pattern in mark_patterns() {
        for captures in pattern.captures_iter(rationale) {
            let whole = captures.get(0).unwrap();
            if let Some(value) = captures.get(1).and_then(|m| parse_number(m.as_str())) {
                candidates.push((whole.start(), value));
            }
        }
    }
    candidates.sort_by_key(|(start, _)| *start);
    candidates
        .into_iter()
        .map(|(_, value)| value)
        .find(|value| range.contains(*value))
        .ok_or(MetricsError::NoMark)
}

/// Evaluation summary emitted by the scoring command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub qwk: f64,
    pub confusion: Vec<Vec<u64>>,
    pub correct_ratio: Option<f64>,
    pub n: u64,
    pub skipped: u64,
    pub unextractable: u64,
}

impl MetricsReport {
    /// Compute all agreement metrics over aligned label vectors (already
    /// shifted to 0-based classes).
    pub fn compute(
        gold: &[usize],
        pred: &[usize],
        k: usize,
        correct_ratio: Option<f64>,
        skipped: u64,
        unextractable: u64,
    ) -> Result<Self, MetricsError> {
        let (accuracy, macro_f1, confusion) = accuracy_macro_f1(gold, pred, k)?;
        let qwk = quadratic_weighted_kappa(gold, pred, k)?;
        Ok(MetricsReport {
            accuracy,
            macro_f1,
            qwk,
            confusion,
            correct_ratio,
            n: gold.len() as u64,
            skipped,
            unextractable,
        })
    }
}

/// Per-run synthetic dataset statistics. The amplification ratio compares
/// SFT records plus preference pairs against source responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub responses: u64,
    pub sft_records: u64,
    pub preference_pairs: u64,
    pub score_records: u64,
    pub skipped_responses: u64,
    pub no_gold_responses: u64,
    pub rejected_paths: u64,
    pub amplification_ratio: f64,
}

pub fn dataset_stats(
    responses: u64,
    sft_records: u64,
    preference_pairs: u64,
    score_records: u64,
    skipped_responses: u64,
    no_gold_responses: u64,
    rejected_paths: u64,
) -> DatasetStats {
    let amplification_ratio = if responses == 0 {
        0.0
    } else {
        (sft_records + preference_pairs) as f64 / responses as f64
    };
    DatasetStats {
        responses,
        sft_records,
        preference_pairs,
        score_records,
        skipped_responses,
        no_gold_responses,
        rejected_paths,
        amplification_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AssessmentPath, Decision};

    #[test]
    fn perfect_agreement_is_exactly_one() {
        let gold = vec![0, 1, 2, 3, 1, 2];
        let qwk = quadratic_weighted_kappa(&gold, &gold, 4).unwrap();
        assert_eq!(qwk, 1.0);
        let (acc, f1, confusion) = accuracy_macro_f1(&gold, &gold, 4).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(f1, 1.0);
        for (i, row) in confusion.iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                assert_eq!(count > 0, i == j && gold.contains(&i));
            }
        }
    }

    #[test]
    fn k4_weight_is_one_ninth() {
        assert!((quadratic_weight(0, 1, 4) - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(quadratic_weight(2, 2, 4), 0.0);
        assert_eq!(quadratic_weight(0, 3, 4), 1.0);
    }

    #[test]
    fn qwk_matches_frozen_reference_value() {
        // Reference value computed once with an independent implementation.
        let gold = vec![0, 0, 1, 2, 3];
        let pred = vec![0, 1, 1, 2, 2];
        let qwk = quadratic_weighted_kappa(&gold, &pred, 4).unwrap();
        assert!((qwk - 0.791_666_666_666_666_7).abs() < 1e-9, "{qwk}");
        let (acc, f1, _) = accuracy_macro_f1(&gold, &pred, 4).unwrap();
        assert!((acc - 0.6).abs() < 1e-12);
        assert!((f1 - 0.5).abs() < 1e-9, "{f1}");
    }

    #[test]
    fn three_class_mixed_case_matches_frozen_values() {
        let gold = vec![0, 1, 2, 0, 1, 2, 0, 0];
        let pred = vec![0, 2, 1, 0, 0, 2, 2, 0];
        let (acc, f1, _) = accuracy_macro_f1(&gold, &pred, 3).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
        assert!((f1 - 0.383_333_333_333_333_3).abs() < 1e-9, "{f1}");
        let qwk = quadratic_weighted_kappa(&gold, &pred, 3).unwrap();
        assert!((qwk - 0.44).abs() < 1e-9, "{qwk}");
    }

    #[test]
    fn total_disagreement_zeroes_both() {
        let (acc, f1, _) = accuracy_macro_f1(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!(acc, 0.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn qwk_symmetry_and_reversal_invariance() {
        let gold = vec![0, 2, 3, 1, 0, 3, 2, 2];
        let pred = vec![1, 2, 3, 0, 0, 2, 3, 1];
        let k = 4;
        let a = quadratic_weighted_kappa(&gold, &pred, k).unwrap();
        let b = quadratic_weighted_kappa(&pred, &gold, k).unwrap();
        assert!((a - b).abs() < 1e-12);
        let flip = |v: &[usize]| v.iter().map(|&x| k - 1 - x).collect::<Vec<_>>();
        let c = quadratic_weighted_kappa(&flip(&gold), &flip(&pred), k).unwrap();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn degenerate_marginals_are_an_error() {
        let err = quadratic_weighted_kappa(&[1, 1, 1], &[1, 1, 1], 3).unwrap_err();
        assert_eq!(err, MetricsError::UndefinedKappa);
    }

    #[test]
    fn label_contract_errors() {
        assert!(matches!(
            quadratic_weighted_kappa(&[0], &[0, 1], 2),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            quadratic_weighted_kappa(&[], &[], 2),
            Err(MetricsError::Empty)
        ));
        assert!(matches!(
            quadratic_weighted_kappa(&[5], &[0], 4),
            Err(MetricsError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            quadratic_weighted_kappa(&[0], &[0], 1),
            Err(MetricsError::BadK(1))
        ));
    }

    fn tree_with_scores(scores: &[u32]) -> ThoughtTree {
        ThoughtTree {
            response_id: "r".into(),
            skipped: None,
            nodes: Vec::new(),
            paths: scores
                .iter()
                .map(|&score| AssessmentPath {
                    decisions: vec![Decision::Yes],
                    prob: 1.0 / scores.len() as f64,
                    score,
                    rubric_score: None,
                    clamped: false,
                })
                .collect(),
            best_path: Some(0),
        }
    }

    #[test]
    fn correct_ratio_counts_containing_trees() {
        let trees = vec![
            tree_with_scores(&[0, 1]),
            tree_with_scores(&[2]),
            tree_with_scores(&[0, 3]),
            tree_with_scores(&[1, 2]),
        ];
        // Trees contain {0,1}, {2}, {0,3}, {1,2}: golds hit 3 of 4.
        let golds = vec![1, 2, 2, 1];
        let ratio = correct_ratio(&trees, &golds).unwrap();
        assert!((ratio - 0.75).abs() < 1e-12);

        let all = correct_ratio(&trees, &[1, 2, 3, 1]).unwrap();
        assert_eq!(all, 1.0);
    }

    #[test]
    fn correct_ratio_all_skipped_errors() {
        let trees = vec![
            ThoughtTree::skipped("a", "refusal"),
            ThoughtTree::skipped("b", "refusal"),
        ];
        assert_eq!(
            correct_ratio(&trees, &[0, 1]).unwrap_err(),
            MetricsError::AllSkipped
        );
    }

    #[test]
    fn skipped_trees_are_excluded_from_the_denominator() {
        let trees = vec![tree_with_scores(&[1]), ThoughtTree::skipped("b", "refusal")];
        let ratio = correct_ratio(&trees, &[1, 1]).unwrap();
        assert_eq!(ratio, 1.0);
    }

    #[test]
    fn extract_mark_reference_phrasings() {
        let range = ScoreRange { min: 0, max: 3 };
        assert_eq!(
            extract_mark(
                "The student's answer scored 2 points as per the marking rubric…",
                range
            )
            .unwrap(),
            2
        );
        assert_eq!(
            extract_mark(
                "1 point; This response describes one additional piece…",
                range
            )
            .unwrap(),
            1
        );
        assert_eq!(
            extract_mark("The answer received a score of 3 overall.", range).unwrap(),
            3
        );
        assert_eq!(
            extract_mark("The rubric awards 0 points for this response.", range).unwrap(),
            0
        );
        assert_eq!(
            extract_mark("The student's answer scored two points here.", range).unwrap(),
            2
        );
    }

    #[test]
    fn extract_mark_skips_out_of_range_then_matches() {
        let range = ScoreRange { min: 0, max: 3 };
        // First candidate (7) is out of range; the later in-range one wins.
        assert_eq!(
            extract_mark("awarded 7 points... in truth a score of 2", range).unwrap(),
            2
        );
    }

    #[test]
    fn extract_mark_earliest_position_wins() {
        let range = ScoreRange { min: 0, max: 3 };
        assert_eq!(
            extract_mark("scored 1 points... later a score of 3", range).unwrap(),
            1
        );
    }

    #[test]
    fn extract_mark_failure() {
        let range = ScoreRange { min: 0, max: 3 };
        assert_eq!(
            extract_mark("The response shows misunderstanding.", range).unwrap_err(),
            MetricsError::NoMark
        );
    }

    #[test]
    fn dataset_stats_ratio() {
        let stats = dataset_stats(10, 8, 20, 25, 1, 1, 3);
        assert!((stats.amplification_ratio - 2.8).abs() < 1e-12);
        let empty = dataset_stats(0, 0, 0, 0, 0, 0, 0);
        assert_eq!(empty.amplification_ratio, 0.0);
    }
}
