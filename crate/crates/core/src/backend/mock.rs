//! Seeded deterministic mock backend.
//!
//! Decision requests draw Yes/No samples from a ChaCha stream keyed by the
//! script seed and the full canonical request (which carries the response
//! id, element id, and decision prefix), so identical requests always
//! produce identical candidate lists and thread scheduling cannot change
//! outcomes. All other request classes return canned text templates with
//! `{placeholder}` substitution.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    detect_refusal, estimate_tokens, validate_request, Backend, BackendError, ChatRequest,
    Completion, RequestClass, TokenUsage, UsageMeter, DEFAULT_REFUSAL_MARKERS,
};

/// Scripted probability of answering Yes for a (response, element,
/// decision-prefix) combination. Omitted fields match anything; the most
/// specific matching rule wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    pub p_yes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub seed: u64,
    #[serde(default = "default_p_yes")]
    pub default_p_yes: f64,
    #[serde(default)]
    pub decision_rules: Vec<DecisionRule>,
    /// Canned completion per request class (serde name of [`RequestClass`]).
    #[serde(default)]
    pub canned_texts: BTreeMap<String, String>,
    /// Probability that a decision candidate comes back unparseable.
    #[serde(default)]
    pub noise: f64,
    /// Response ids whose requests are refused outright.
    #[serde(default)]
    pub refuse_responses: BTreeSet<String>,
}

fn default_p_yes() -> f64 {
    0.5
}

impl MockScript {
    pub fn with_seed(seed: u64) -> Self {
        MockScript {
            seed,
            default_p_yes: default_p_yes(),
            decision_rules: Vec::new(),
            canned_texts: BTreeMap::new(),
            noise: 0.0,
            refuse_responses: BTreeSet::new(),
        }
    }

    pub fn rule(
        mut self,
        response_id: Option<&str>,
        element_id: Option<&str>,
        prefix: Option<&str>,
        p_yes: f64,
    ) -> Self {
        self.decision_rules.push(DecisionRule {
            response_id: response_id.map(Into::into),
            element_id: element_id.map(Into::into),
            prefix: prefix.map(Into::into),
            p_yes,
        });
        self
    }

    fn p_yes_for(
        &self,
        response_id: Option<&str>,
        element_id: Option<&str>,
        prefix: Option<&str>,
    ) -> f64 {
        let mut best: Option<(usize, f64)> = None;
        for rule in &self.decision_rules {
            let mut specificity = 0;
            let mut matches = true;
            for (want, have) in [
                (rule.response_id.as_deref(), response_id),
                (rule.element_id.as_deref(), element_id),
                (rule.prefix.as_deref(), prefix),
            ] {
                match want {
                    None => {}
                    Some(w) => {
                        if have == Some(w) {
                            specificity += 1;
                        } else {
                            matches = false;
                            break;
                        }
                    }
                }
            }
            if matches && best.map_or(true, |(s, _)| specificity > s) {
                best = Some((specificity, rule.p_yes));
            }
        }
        best.map(|(_, p)| p).unwrap_or(self.default_p_yes)
    }
}

const CANNED_ELEMENT_RATIONALE: &str =
    "Quoting \"...\" from the answer supports the {decision} decision for {element_id}.";
const CANNED_SUMMARIZATION: &str = "{\"mark\": {score}, \"rationale\": \"The student's answer scored {score} points according to the marking rubric; the element decisions were {prefix}.\", \"suggestion\": \"Address the key points that were decided No.\"}";
const CANNED_ADJUDICATION: &str = "1";

pub struct MockBackend {
    script: MockScript,
    model: String,
    meter: UsageMeter,
    refusal_markers: Vec<String>,
}

impl MockBackend {
    pub fn new(script: MockScript, model: impl Into<String>) -> Self {
        Self::with_budget(script, model, None)
    }

    pub fn with_budget(
        script: MockScript,
        model: impl Into<String>,
        token_budget: Option<u64>,
    ) -> Self {
        MockBackend {
            script,
            model: model.into(),
            meter: UsageMeter::new(token_budget),
            refusal_markers: DEFAULT_REFUSAL_MARKERS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Stream keyed by (seed, canonical request): identical requests give
    /// identical draws; any content difference yields an independent stream.
    fn rng_for(&self, request: &ChatRequest) -> ChaCha8Rng {
        let canonical = crate::json::canonical_string(request).expect("request serializes");
        let mut hasher = Sha256::new();
        hasher.update(self.script.seed.to_le_bytes());
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    fn substitute(&self, template: &str, request: &ChatRequest) -> String {
        let meta = &request.meta;
        template
            .replace("{response_id}", meta.response_id.as_deref().unwrap_or(""))
            .replace("{element_id}", meta.element_id.as_deref().unwrap_or(""))
            .replace("{prefix}", meta.prefix.as_deref().unwrap_or(""))
            .replace(
                "{decision}",
                meta.decision.map(|d| d.as_str()).unwrap_or(""),
            )
            .replace(
                "{score}",
                &meta.score.map(|s| s.to_string()).unwrap_or_default(),
            )
            .replace("{n}", &request.n.to_string())
    }

    fn canned_for(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let key = serde_json::to_value(request.meta.class)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        if let Some(template) = self.script.canned_texts.get(&key) {
            return Ok(self.substitute(template, request));
        }
        let default = match request.meta.class {
            RequestClass::ElementRationale => CANNED_ELEMENT_RATIONALE,
            RequestClass::Summarization => CANNED_SUMMARIZATION,
            RequestClass::Adjudication => CANNED_ADJUDICATION,
            _ => {
                return Err(BackendError::Configuration(format!(
                    "mock script has no canned text for request class '{key}'"
                )))
            }
        };
        Ok(self.substitute(default, request))
    }

    fn decision_texts(&self, request: &ChatRequest) -> Vec<String> {
        let meta = &request.meta;
        let p_yes = self.script.p_yes_for(
            meta.response_id.as_deref(),
            meta.element_id.as_deref(),
            meta.prefix.as_deref(),
        );
        let mut rng = self.rng_for(request);
        (0..request.n)
            .map(|_| {
                // Draw order is fixed: noise gate first, then the decision.
                let noisy = rng.random::<f64>() < self.script.noise;
                let yes = rng.random::<f64>() < p_yes;
                if noisy {
                    "Unclear".to_string()
                } else if yes {
                    "Yes".to_string()
                } else {
                    "No".to_string()
                }
            })
            .collect()
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        validate_request(request)?;
        self.meter.check_budget()?;

        let texts = if self
            .script
            .refuse_responses
            .contains(request.meta.response_id.as_deref().unwrap_or(""))
        {
            vec!["[REFUSED] content management policy".to_string(); request.n as usize]
        } else {
            match request.meta.class {
                RequestClass::Decision => self.decision_texts(request),
                _ => vec![self.canned_for(request)?; request.n as usize],
            }
        };

        let prompt_tokens: u64 = request
            .messages
            .iter()
            .map(|m| estimate_tokens(&m.content))
            .sum();
        let completion_tokens: u64 = texts.iter().map(|t| estimate_tokens(t)).sum();
        self.meter.record(prompt_tokens, completion_tokens);

        if let Some(reason) = detect_refusal(&texts, &self.refusal_markers) {
            return Err(BackendError::Refusal(reason));
        }

        Ok(Completion {
            texts,
            prompt_tokens,
            completion_tokens,
            cached: false,
        })
    }

    fn calls(&self) -> u64 {
        self.meter.calls()
    }

    fn usage(&self) -> TokenUsage {
        self.meter.usage()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RequestMeta;
    use crate::domain::ChatMessage;

    fn decision_request(response: &str, element: &str, prefix: &str, n: u32) -> ChatRequest {
        ChatRequest {
            messages: vec![ChatMessage::user("does the answer specify X?")],
            temperature: 0.7,
            n,
            max_tokens: 4,
            stop: None,
            meta: RequestMeta {
                class: RequestClass::Decision,
                response_id: Some(response.into()),
                element_id: Some(element.into()),
                prefix: Some(prefix.into()),
                decision: None,
                score: None,
            },
        }
    }

    #[test]
    fn golden_multiset_for_seed_42() {
        // Golden value captured once from the frozen generator: the exact
        // Yes/No counts for p_yes = 0.7, n = 10, seed 42 must never drift.
        let script = MockScript::with_seed(42).rule(None, None, None, 0.7);
        let backend = MockBackend::new(script, "mock-model");
        let completion = backend
            .complete(&decision_request("r1", "e1", "", 10))
            .unwrap();
        let yes = completion.texts.iter().filter(|t| *t == "Yes").count();
        let no = completion.texts.iter().filter(|t| *t == "No").count();
        assert_eq!(completion.texts.len(), 10);
        assert_eq!((yes, no), (6, 4), "texts: {:?}", completion.texts);
    }

    #[test]
    fn unanimous_rule_yields_all_yes() {
        let script = MockScript::with_seed(1).rule(None, None, None, 1.0);
        let backend = MockBackend::new(script, "mock-model");
        let completion = backend
            .complete(&decision_request("r1", "e1", "", 10))
            .unwrap();
        assert!(completion.texts.iter().all(|t| t == "Yes"));
    }

    #[test]
    fn identical_requests_draw_identical_texts() {
        let script = MockScript::with_seed(9).rule(None, None, None, 0.4);
        let backend = MockBackend::new(script.clone(), "mock-model");
        let a = backend
            .complete(&decision_request("r1", "e1", "YN", 10))
            .unwrap();
        let b = backend
            .complete(&decision_request("r1", "e1", "YN", 10))
            .unwrap();
        assert_eq!(a.texts, b.texts);
        // A fresh backend (same script) must reproduce the same stream.
        let backend2 = MockBackend::new(script, "mock-model");
        let c = backend2
            .complete(&decision_request("r1", "e1", "YN", 10))
            .unwrap();
        assert_eq!(a.texts, c.texts);
    }

    #[test]
    fn distinct_prefixes_draw_distinct_streams() {
        let script = MockScript::with_seed(9).rule(None, None, None, 0.5);
        let backend = MockBackend::new(script, "mock-model");
        let texts: Vec<Vec<String>> = ["", "Y", "N", "YY"]
            .iter()
            .map(|p| {
                backend
                    .complete(&decision_request("r1", "e2", p, 10))
                    .unwrap()
                    .texts
            })
            .collect();
        assert!(
            texts.windows(2).any(|w| w[0] != w[1]),
            "streams should not all coincide"
        );
    }

    #[test]
    fn most_specific_rule_wins() {
        let script = MockScript::with_seed(3)
            .rule(None, None, None, 0.0)
            .rule(None, Some("e1"), None, 0.0)
            .rule(Some("r1"), Some("e1"), None, 1.0);
        let backend = MockBackend::new(script, "mock-model");
        let completion = backend
            .complete(&decision_request("r1", "e1", "", 10))
            .unwrap();
        assert!(completion.texts.iter().all(|t| t == "Yes"));
    }

    #[test]
    fn refusal_for_scripted_response() {
        let mut script = MockScript::with_seed(3);
        script.refuse_responses.insert("r9".into());
        let backend = MockBackend::new(script, "mock-model");
        let err = backend
            .complete(&decision_request("r9", "e1", "", 10))
            .unwrap_err();
        assert!(matches!(err, BackendError::Refusal(_)));
    }

    #[test]
    fn canned_template_substitution() {
        let mut script = MockScript::with_seed(3);
        script
            .canned_texts
            .insert("element_rationale".into(), "decided {decision} on {element_id}".into());
        let backend = MockBackend::new(script, "mock-model");
        let request = ChatRequest {
            messages: vec![ChatMessage::user("justify")],
            temperature: 0.7,
            n: 1,
            max_tokens: 120,
            stop: None,
            meta: RequestMeta {
                class: RequestClass::ElementRationale,
                response_id: Some("r1".into()),
                element_id: Some("e2".into()),
                prefix: None,
                decision: Some(crate::domain::Decision::Yes),
                score: None,
            },
        };
        let completion = backend.complete(&request).unwrap();
        assert_eq!(completion.texts, vec!["decided Yes on e2".to_string()]);
    }

    #[test]
    fn budget_aborts_cleanly() {
        let script = MockScript::with_seed(3).rule(None, None, None, 0.5);
        let backend = MockBackend::with_budget(script, "mock-model", Some(5));
        backend.complete(&decision_request("r1", "e1", "", 10)).unwrap();
        let err = backend
            .complete(&decision_request("r1", "e2", "", 10))
            .unwrap_err();
        assert!(matches!(err, BackendError::BudgetExceeded { .. }));
    }
}
