//! Prompt rendering for decision queries, element rationales, path
//! summarization, adjudication, and SFT instruction rounds.
//!
//! Decision prompts follow the template
//! `[Key Answer Element]: Does this student answer specify …? Please
//! select Yes … No …`, optionally preceded by demonstrations and by the
//! prior elements' decided blocks, and always ending with
//! `[Student Answer]: "…" [Decision]:`.

use serde::{Deserialize, Serialize};

use crate::backend::{ChatRequest, RequestClass, RequestMeta};
use crate::domain::{
    decision_prefix, ChatMessage, Decision, KeyElement, QuestionSpec, StudentResponse,
};

/// How many demonstrations accompany each key-element query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShotMode {
    ZeroShot,
    #[default]
    FewShot,
    /// Exactly one Yes and one No demonstration.
    FewShotDuo,
}

/// How much of the already-decided elements is replayed before the
/// current query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Each element is a separate, parallel query.
    NoHistory,
    /// Prior element blocks are replayed with their demonstrations.
    History,
    /// Prior element blocks keep their decisions but drop demonstrations.
    #[default]
    HistoryWithoutDemos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ElementOrder {
    #[default]
    Original,
    Shuffled {
        seed: u64,
    },
}

/// Whether path marks come from the deterministic rubric or from asking
/// the backend to total the decisions against the textual rubric. The
/// latter is exploratory only and never feeds dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    DeterministicRubric,
    SumByLlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PromptConfig {
    pub shot_mode: ShotMode,
    pub history_mode: HistoryMode,
    pub element_order: ElementOrder,
    pub score_mode: ScoreMode,
}

/// Generation parameters, defaulting to the reference configuration:
/// decisions sampled 10 times at temperature 0.7 with 4 max tokens,
/// rationales once at 0.7 with 120, summaries once at 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub decision_temperature: f64,
    pub decision_n: u32,
    pub decision_max_tokens: u32,
    pub rationale_temperature: f64,
    pub rationale_max_tokens: u32,
    pub summary_temperature: f64,
    pub summary_max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            decision_temperature: 0.7,
            decision_n: 10,
            decision_max_tokens: 4,
            rationale_temperature: 0.7,
            rationale_max_tokens: 120,
            summary_temperature: 1.0,
            summary_max_tokens: 512,
        }
    }
}

fn demonstrations_for(element: &KeyElement, shot_mode: ShotMode) -> Vec<&crate::domain::Demonstration> {
    match shot_mode {
        ShotMode::ZeroShot => Vec::new(),
        ShotMode::FewShot => element.demonstrations.iter().collect(),
        ShotMode::FewShotDuo => {
            let yes = element
                .demonstrations
                .iter()
                .find(|d| d.decision == Decision::Yes);
            let no = element
                .demonstrations
                .iter()
                .find(|d| d.decision == Decision::No);
            [yes, no].into_iter().flatten().collect()
        }
    }
}

fn element_block(
    element: &KeyElement,
    shot_mode: ShotMode,
    include_demos: bool,
    out: &mut String,
) {
    out.push_str(&format!(
        "[Key Answer Element]: Does this student answer specify {}? Please select Yes for \
matching this key answer element and No for non-matching this key answer element.\n",
        element.query
    ));
    if include_demos {
        for demo in demonstrations_for(element, shot_mode) {
            out.push_str(&format!(
                "[Student Answer]: \"{}\" [Decision]: {}\n",
                demo.answer, demo.decision
            ));
        }
    }
}

/// Render the decision query for one element, given the `(element,
/// decision)` pairs already settled along the current path (empty under
/// `NoHistory`).
pub fn render_decision_prompt(
    question: &QuestionSpec,
    element: &KeyElement,
    response: &StudentResponse,
    history: &[(&KeyElement, Decision)],
    config: &PromptConfig,
    sampling: &SamplingParams,
) -> ChatRequest {
    let mut prompt = format!("[Question]: {}\n", question.prompt);
    for (prior, decision) in history {
        let include_demos = config.history_mode == HistoryMode::History;
        element_block(prior, config.shot_mode, include_demos, &mut prompt);
        prompt.push_str(&format!(
            "[Student Answer]: \"{}\" [Decision]: {}\n",
            response.text, decision
        ));
    }
    element_block(
        element,
        config.shot_mode,
        config.shot_mode != ShotMode::ZeroShot,
        &mut prompt,
    );
    prompt.push_str(&format!("[Student Answer]: \"{}\" [Decision]:", response.text));

    let prefix: String = history.iter().map(|(_, d)| d.letter()).collect();
    ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature: sampling.decision_temperature,
        n: sampling.decision_n,
        max_tokens: sampling.decision_max_tokens,
        stop: None,
        meta: RequestMeta {
            class: RequestClass::Decision,
            response_id: Some(response.id.clone()),
            element_id: Some(element.id.clone()),
            prefix: Some(prefix),
            decision: None,
            score: None,
        },
    }
}

/// Follow-up turn asking the backend to justify a decision it just made,
/// quoting the supporting span of the student answer.
pub fn render_rationale_prompt(
    question: &QuestionSpec,
    element: &KeyElement,
    response: &StudentResponse,
    decision: Decision,
    config: &PromptConfig,
    sampling: &SamplingParams,
) -> ChatRequest {
    let decision_request =
        render_decision_prompt(question, element, response, &[], config, sampling);
    let mut messages = decision_request.messages;
    messages.push(ChatMessage::assistant(decision.as_str()));
    messages.push(ChatMessage::user(
        "Please generate a rationale that justifies your above decision. Quote ** part of \
this student answer ** (e.g. just a few words) that answers this key element with \"...\". \
Do not include any other additional information that are not relevant to this decision.",
    ));
    ChatRequest {
        messages,
        temperature: sampling.rationale_temperature,
        n: 1,
        max_tokens: sampling.rationale_max_tokens,
        stop: None,
        meta: RequestMeta {
            class: RequestClass::ElementRationale,
            response_id: Some(response.id.clone()),
            element_id: Some(element.id.clone()),
            prefix: None,
            decision: Some(decision),
            score: None,
        },
    }
}

/// Per-element line in the summarization prompt.
pub struct SummaryItem<'a> {
    pub element: &'a KeyElement,
    pub decision: Decision,
    pub rationale: &'a str,
}

/// Render the response-level summarization prompt: the question, the
/// answer, every element-level decision with its rationale, the textual
/// rubric, the path score, and the JSON output contract.
pub fn render_summarization_prompt(
    question: &QuestionSpec,
    response: &StudentResponse,
    items: &[SummaryItem<'_>],
    path_score: u32,
    path_decisions: &[Decision],
    sampling: &SamplingParams,
    correction: Option<&str>,
) -> ChatRequest {
    let mut prompt = String::new();
    if let Some(c) = correction {
        prompt.push_str(&format!(
            "Your previous summary was rejected: {c}. Follow the format exactly this time.\n\n"
        ));
    }
    prompt.push_str(&format!(
        "Here is a student answer to the following question:\n\"{}\"\n[Student Answer]: \"{}\"\n\
This question follows a points mark scheme, and the breakdown assessment by each Key Answer \
Element for this student's answer is as follows:\n",
        question.prompt, response.text
    ));
    for (idx, item) in items.iter().enumerate() {
        prompt.push_str(&format!(
            "{}. {} - {}: {}\n",
            idx + 1,
            item.element.query,
            item.decision,
            item.rationale
        ));
    }
    prompt.push_str(&format!(
        "\nAccording to the: \"{}\", the answer should get a score of {}.\n\n\
Please summarize the above rationales and be FAITHFUL to the given assessment decisions for \
this student's answer briefly and precisely. Give the summarization in JSON format:\n\
```JSON\n{{\n    \"mark\": \"...\", # numeric\n    \"rationale\": \"...\", # including mark \
awarded, which marking rubric applied, and detailed key elements level rationale\n    \
\"suggestion\": \"...\" # any answer improvement suggestion\n}}```\n\
- The \"mark\" should be the score of the student's answer.\n\
- The \"rationale\" should be concise, include the assessed score and rubric applied, more \
importantly, justify the **marking decision-making processes** by **summarizing** the key \
element-level rationales, you must **quote the exact part** from the student's answer.\n\
- If the student didn't get a full mark, you can also provide some suggestions for \
improvement; otherwise, leave it blank.",
        question.rubric.source_text(),
        path_score
    ));
    ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature: sampling.summary_temperature,
        n: 1,
        max_tokens: sampling.summary_max_tokens,
        stop: None,
        meta: RequestMeta {
            class: RequestClass::Summarization,
            response_id: Some(response.id.clone()),
            element_id: None,
            prefix: Some(decision_prefix(path_decisions)),
            decision: None,
            score: Some(path_score),
        },
    }
}

/// Ask the backend to pick the most appropriate of several same-mark
/// rationales by 1-based index.
pub fn render_adjudication_prompt(
    question: &QuestionSpec,
    response: &StudentResponse,
    rationales: &[&str],
    retry_note: Option<&str>,
) -> ChatRequest {
    let mut prompt = String::new();
    if let Some(note) = retry_note {
        prompt.push_str(&format!("{note}\n\n"));
    }
    prompt.push_str(&format!(
        "[Question]: {}\n[Student Answer]: \"{}\"\n\
The following assessment rationales all assign the same mark. Select the one that most \
appropriately and accurately reflects the student's response.\n",
        question.prompt, response.text
    ));
    for (i, rationale) in rationales.iter().enumerate() {
        prompt.push_str(&format!("{}. {}\n", i + 1, rationale));
    }
    prompt.push_str(&format!(
        "Respond with only the number (1-{}) of the best rationale.",
        rationales.len()
    ));
    ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature: 0.0,
        n: 1,
        max_tokens: 8,
        stop: None,
        meta: RequestMeta {
            class: RequestClass::Adjudication,
            response_id: Some(response.id.clone()),
            element_id: None,
            prefix: None,
            decision: None,
            score: None,
        },
    }
}

/// Ask the backend to total a decision vector against the textual rubric
/// (the exploratory `SumByLlm` scoring mode).
pub fn render_score_sum_prompt(
    question: &QuestionSpec,
    response: &StudentResponse,
    decisions_by_element: &[(&KeyElement, Decision)],
) -> ChatRequest {
    let mut prompt = format!(
        "[Question]: {}\n[Student Answer]: \"{}\"\nThe key answer element decisions are:\n",
        question.prompt, response.text
    );
    for (element, decision) in decisions_by_element {
        prompt.push_str(&format!("- {}: {}\n", element.query, decision));
    }
    prompt.push_str(&format!(
        "[Marking Rubric]: \"{}\"\nApply the marking rubric to these decisions and respond \
with only the integer score.",
        question.rubric.source_text()
    ));
    let decisions: Vec<Decision> = decisions_by_element.iter().map(|(_, d)| *d).collect();
    ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature: 0.0,
        n: 1,
        max_tokens: 8,
        stop: None,
        meta: RequestMeta {
            class: RequestClass::ScoreSum,
            response_id: Some(response.id.clone()),
            element_id: None,
            prefix: Some(decision_prefix(&decisions)),
            decision: None,
            score: None,
        },
    }
}

/// Instruction pool for the first (rationale) SFT round.
pub const RATIONALE_INSTRUCTIONS: [&str; 7] = [
    "Evaluate the [Student Answer] based on the provided [Key Answer Elements] and [Marking Rubric]. Summarize the assessment and justify the score awarded: ",
    "Analyze the [Student Answer] thoroughly. Generate a detailed rationale that explains the strengths and weaknesses of the response:",
    "Conduct a comprehensive evaluation of the [Student Answer] using the provided [Key Answer Elements] and any relevant background information. Provide a detailed rationale for the assessment, including specific references to the [Marking Rubric]:",
    "Critically assess the [Student Answer] in light of the [Key Answer Elements]. Offer a detailed explanation for the score assigned, referencing specific criteria from the [Marking Rubric]:",
    "Review the [Student Answer] for accuracy and completeness compared to the [Key Answer Elements]. Provide a comprehensive rationale that includes the strengths, weaknesses, and areas for improvement:",
    "Examine the [Student Answer] thoroughly, comparing it against the [Key Answer Elements] and using the guidelines provided in the [Marking Rubric]. Clearly articulate the reasoning behind each point awarded or deducted:",
    "Systematically evaluate the [Student Answer] by aligning it with the [Key Answer Elements] and assessing according to the [Marking Rubric]. Document your findings and the logic of your evaluation comprehensively:",
];

/// Instruction pool for the second (suggestion) SFT round.
pub const SUGGESTION_INSTRUCTIONS: [&str; 5] = [
    "Analyze the [Student Answer] and identify areas for improvement. Suggest specific changes that could enhance the clarity, accuracy, and depth of the response:",
    "Please provide targeted suggestions to help the student refine their answer for better alignment with the expected criteria:",
    "Please offer some actionable feedback that the student can use to improve their response:",
    "Could you propose concrete improvements that could elevate the response's overall quality and effectiveness:",
    "Please recommend enhancements that can strengthen the logic, persuasiveness, and completeness of the answer:",
];

/// First-round SFT user turn: the drawn instruction plus the entire
/// question information and the student answer.
pub fn render_sft_round1(
    instruction: &str,
    question: &QuestionSpec,
    response: &StudentResponse,
) -> String {
    let elements = question
        .key_elements
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {}", i + 1, e.query))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        "{instruction}\n[Question]: {}\n[Key Answer Elements]:\n{elements}\n[Marking Rubric]: \
\"{}\"\n[Student Answer]: \"{}\"",
        question.prompt,
        question.rubric.source_text(),
        response.text
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Demonstration, ScoreRange};
    use crate::rubric::{RubricSpec, Threshold};

    fn question() -> QuestionSpec {
        QuestionSpec {
            id: "q1".into(),
            prompt: "Explain the required steps.".into(),
            key_elements: vec![
                KeyElement {
                    id: "e1".into(),
                    query: "the amount of vinegar used".into(),
                    demonstrations: vec![
                        Demonstration {
                            answer: "use 30mL of vinegar".into(),
                            decision: Decision::Yes,
                        },
                        Demonstration {
                            answer: "pour some liquid".into(),
                            decision: Decision::No,
                        },
                        Demonstration {
                            answer: "exactly two spoonfuls of vinegar".into(),
                            decision: Decision::Yes,
                        },
                    ],
                },
                KeyElement {
                    id: "e2".into(),
                    query: "the drying time".into(),
                    demonstrations: vec![
                        Demonstration {
                            answer: "dry for 30 minutes".into(),
                            decision: Decision::Yes,
                        },
                        Demonstration {
                            answer: "let them sit".into(),
                            decision: Decision::No,
                        },
                    ],
                },
            ],
            rubric: RubricSpec::CountThreshold {
                thresholds: vec![
                    Threshold { min_yes: 2, score: 2 },
                    Threshold { min_yes: 1, score: 1 },
                ],
                default_score: 0,
                source_text: "2 points for two details; 1 for one; else 0".into(),
            },
            score_range: ScoreRange { min: 0, max: 2 },
        }
    }

    fn response() -> StudentResponse {
        StudentResponse {
            id: "r1".into(),
            text: "You need how much vinegar.".into(),
            gold_score: Some(1),
        }
    }

    #[test]
    fn zero_shot_no_history_has_single_block_and_no_demos() {
        let q = question();
        let r = response();
        let config = PromptConfig {
            shot_mode: ShotMode::ZeroShot,
            history_mode: HistoryMode::NoHistory,
            ..PromptConfig::default()
        };
        let request = render_decision_prompt(
            &q,
            &q.key_elements[0],
            &r,
            &[],
            &config,
            &SamplingParams::default(),
        );
        let prompt = &request.messages[0].content;
        assert_eq!(prompt.matches("[Key Answer Element]").count(), 1);
        assert!(!prompt.contains("use 30mL of vinegar"));
        assert!(prompt.ends_with("[Decision]:"));
        assert_eq!(request.n, 10);
        assert_eq!(request.max_tokens, 4);
        assert!((request.temperature - 0.7).abs() < 1e-12);
    }

    #[test]
    fn history_without_demos_keeps_decision_drops_demonstrations() {
        let q = question();
        let r = response();
        let config = PromptConfig::default(); // few_shot, history_without_demos
        let history = vec![(&q.key_elements[0], Decision::Yes)];
        let request = render_decision_prompt(
            &q,
            &q.key_elements[1],
            &r,
            &history,
            &config,
            &SamplingParams::default(),
        );
        let prompt = &request.messages[0].content;
        assert!(prompt.contains("the amount of vinegar used"));
        assert!(prompt.contains("[Decision]: Yes\n"));
        assert!(
            !prompt.contains("use 30mL of vinegar"),
            "prior element demonstrations must be stripped"
        );
        assert!(
            prompt.contains("dry for 30 minutes"),
            "current element keeps its demonstrations"
        );
        assert_eq!(request.meta.prefix.as_deref(), Some("Y"));
    }

    #[test]
    fn full_history_replays_prior_demonstrations() {
        let q = question();
        let r = response();
        let config = PromptConfig {
            history_mode: HistoryMode::History,
            ..PromptConfig::default()
        };
        let history = vec![(&q.key_elements[0], Decision::No)];
        let request = render_decision_prompt(
            &q,
            &q.key_elements[1],
            &r,
            &history,
            &config,
            &SamplingParams::default(),
        );
        assert!(request.messages[0].content.contains("use 30mL of vinegar"));
    }

    #[test]
    fn duo_mode_renders_exactly_one_yes_and_one_no() {
        let q = question();
        let r = response();
        let config = PromptConfig {
            shot_mode: ShotMode::FewShotDuo,
            history_mode: HistoryMode::NoHistory,
            ..PromptConfig::default()
        };
        let request = render_decision_prompt(
            &q,
            &q.key_elements[0],
            &r,
            &[],
            &config,
            &SamplingParams::default(),
        );
        let prompt = &request.messages[0].content;
        assert_eq!(prompt.matches("[Decision]: Yes").count(), 1);
        assert_eq!(prompt.matches("[Decision]: No").count(), 1);
        assert!(!prompt.contains("exactly two spoonfuls"));
    }

    #[test]
    fn rationale_prompt_carries_decision_turn() {
        let q = question();
        let r = response();
        let request = render_rationale_prompt(
            &q,
            &q.key_elements[0],
            &r,
            Decision::Yes,
            &PromptConfig::default(),
            &SamplingParams::default(),
        );
        assert_eq!(request.messages.len(), 3);
        assert_eq!(request.messages[1].content, "Yes");
        assert!(request.messages[2].content.contains("justifies your above decision"));
        assert_eq!(request.n, 1);
        assert_eq!(request.max_tokens, 120);
    }

    #[test]
    fn summarization_prompt_lists_items_and_score() {
        let q = question();
        let r = response();
        let items = vec![
            SummaryItem {
                element: &q.key_elements[0],
                decision: Decision::Yes,
                rationale: "quotes \"how much vinegar\"",
            },
            SummaryItem {
                element: &q.key_elements[1],
                decision: Decision::No,
                rationale: "no drying time given",
            },
        ];
        let request = render_summarization_prompt(
            &q,
            &r,
            &items,
            1,
            &[Decision::Yes, Decision::No],
            &SamplingParams::default(),
            None,
        );
        let prompt = &request.messages[0].content;
        assert!(prompt.contains("the answer should get a score of 1"));
        assert!(prompt.contains("1. the amount of vinegar used - Yes:"));
        assert!(prompt.contains("be FAITHFUL"));
        assert!((request.temperature - 1.0).abs() < 1e-12);
        assert_eq!(request.meta.score, Some(1));
        assert_eq!(request.meta.prefix.as_deref(), Some("YN"));
    }

    #[test]
    fn sft_round1_contains_question_information() {
        let q = question();
        let r = response();
        let content = render_sft_round1(RATIONALE_INSTRUCTIONS[0], &q, &r);
        assert!(content.contains("[Question]: Explain the required steps."));
        assert!(content.contains("[Key Answer Elements]:"));
        assert!(content.contains("[Marking Rubric]:"));
        assert!(content.contains(&r.text));
    }

    #[test]
    fn instruction_pools_have_expected_sizes() {
        assert_eq!(RATIONALE_INSTRUCTIONS.len(), 7);
        assert_eq!(SUGGESTION_INSTRUCTIONS.len(), 5);
    }
}
