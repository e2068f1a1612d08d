//! Run configuration: a single JSON document, every field defaulted and
//! overridable by a CLI flag. Credentials never appear here — the remote
//! backend reads `LLM_API_KEY` from the environment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use treescore_core::backend::{
    Backend, CachedBackend, MockBackend, PriceTable, RemoteBackend, RemoteConfig, TokenUsage,
};
use treescore_core::factory::AdjudicationMode;
use treescore_core::prompt::{HistoryMode, PromptConfig, SamplingParams, ScoreMode, ShotMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model: String,
    pub mock_script: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    pub token_budget: Option<u64>,
    pub price: PriceTable,
    pub refusal_markers: Option<Vec<String>>,
    pub supports_multi_candidate: bool,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            base_url: None,
            model: "mock-model".into(),
            mock_script: None,
            cache_dir: None,
            max_in_flight: 4,
            token_budget: None,
            price: PriceTable::default(),
            refusal_markers: None,
            supports_multi_candidate: true,
            backoff_ms: 250,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorySection {
    pub p_min: f64,
    pub adjudication: AdjudicationMode,
    pub seed: Option<u64>,
    /// Cross-entropy weight recorded for downstream preference training.
    pub ce_weight: f64,
}

impl Default for FactorySection {
    fn default() -> Self {
        FactorySection {
            p_min: 0.01,
            adjudication: AdjudicationMode::default(),
            seed: None,
            ce_weight: treescore_core::preference::DEFAULT_CE_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub question: PathBuf,
    pub responses: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            question: PathBuf::from("question.json"),
            responses: PathBuf::from("responses.jsonl"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub prompt: PromptConfig,
    pub sampling: SamplingParams,
    pub factory: FactorySection,
    pub paths: PathsSection,
}

/// CLI-flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub p_min: Option<f64>,
    pub history_mode: Option<HistoryMode>,
    pub shot_mode: Option<ShotMode>,
    pub score_mode: Option<ScoreMode>,
    pub adjudication: Option<AdjudicationMode>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(kind) = overrides.backend {
            self.backend.kind = kind;
        }
        if let Some(seed) = overrides.seed {
            self.factory.seed = Some(seed);
        }
        if let Some(out_dir) = &overrides.out_dir {
            self.paths.out_dir = out_dir.clone();
        }
        if let Some(p_min) = overrides.p_min {
            self.factory.p_min = p_min;
        }
        if let Some(mode) = overrides.history_mode {
            self.prompt.history_mode = mode;
        }
        if let Some(mode) = overrides.shot_mode {
            self.prompt.shot_mode = mode;
        }
        if let Some(mode) = overrides.score_mode {
            self.prompt.score_mode = mode;
        }
        if let Some(mode) = overrides.adjudication {
            self.factory.adjudication = mode;
        }
    }

    /// Check that referenced input files exist and that mock runs carry
    /// the mandatory seed and script.
    pub fn validate_inputs(&self, needs_responses: bool) -> Result<()> {
        if !self.paths.question.exists() {
            bail!("question file not found: {}", self.paths.question.display());
        }
        if needs_responses && !self.paths.responses.exists() {
            bail!(
                "responses file not found: {}",
                self.paths.responses.display()
            );
        }
        if self.backend.kind == BackendKind::Mock {
            let script = self
                .backend
                .mock_script
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("mock backend requires backend.mock_script"))?;
            if !script.exists() {
                bail!("mock script not found: {}", script.display());
            }
            if self.factory.seed.is_none() {
                bail!("mock runs require an explicit factory.seed (or --seed)");
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.factory.seed.unwrap_or(0)
    }

    pub fn factory_config(&self) -> treescore_core::factory::FactoryConfig {
        treescore_core::factory::FactoryConfig {
            p_min: self.factory.p_min,
            adjudication: self.factory.adjudication,
            seed: self.seed(),
        }
    }
}

/// A backend assembled from the config, optionally behind the disk cache.
pub enum PipelineBackend {
    Cached(CachedBackend),
    Plain(Box<dyn Backend>),
}

impl PipelineBackend {
    pub fn cache_hits(&self) -> u64 {
        match self {
            PipelineBackend::Cached(c) => c.hits(),
            PipelineBackend::Plain(_) => 0,
        }
    }
}

impl Backend for PipelineBackend {
    fn id(&self) -> &str {
        match self {
            PipelineBackend::Cached(b) => b.id(),
            PipelineBackend::Plain(b) => b.id(),
        }
    }

    fn model(&self) -> &str {
        match self {
            PipelineBackend::Cached(b) => b.model(),
            PipelineBackend::Plain(b) => b.model(),
        }
    }

    fn complete(
        &self,
        request: &treescore_core::backend::ChatRequest,
    ) -> std::result::Result<treescore_core::backend::Completion, treescore_core::backend::BackendError>
    {
        match self {
            PipelineBackend::Cached(b) => b.complete(request),
            PipelineBackend::Plain(b) => b.complete(request),
        }
    }

    fn calls(&self) -> u64 {
        match self {
            PipelineBackend::Cached(b) => b.calls(),
            PipelineBackend::Plain(b) => b.calls(),
        }
    }

    fn usage(&self) -> TokenUsage {
        match self {
            PipelineBackend::Cached(b) => b.usage(),
            PipelineBackend::Plain(b) => b.usage(),
        }
    }
}

pub fn build_backend(config: &RunConfig) -> Result<PipelineBackend> {
    let section = &config.backend;
    let inner: Box<dyn Backend> = match section.kind {
        BackendKind::Mock => {
            let script_path = section
                .mock_script
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("mock backend requires backend.mock_script"))?;
            let script = treescore_core::json::read_json(script_path)
                .with_context(|| format!("cannot load mock script {}", script_path.display()))?;
            Box::new(MockBackend::with_budget(
                script,
                section.model.clone(),
                section.token_budget,
            ))
        }
        BackendKind::Remote => Box::new(
            RemoteBackend::new(RemoteConfig {
                base_url: section.base_url.clone(),
                model: section.model.clone(),
                supports_multi_candidate: section.supports_multi_candidate,
                max_in_flight: section.max_in_flight,
                max_retries: 3,
                backoff_ms: section.backoff_ms,
                timeout_secs: section.timeout_secs,
                token_budget: section.token_budget,
                refusal_markers: section.refusal_markers.clone(),
            })
            .map_err(|e| anyhow::anyhow!("{e}"))?,
        ),
    };
    Ok(match &section.cache_dir {
        Some(dir) => PipelineBackend::Cached(CachedBackend::new(inner, dir)),
        None => PipelineBackend::Plain(inner),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let config = RunConfig::default();
        assert_eq!(config.sampling.decision_n, 10);
        assert_eq!(config.sampling.decision_max_tokens, 4);
        assert_eq!(config.sampling.rationale_max_tokens, 120);
        assert!((config.sampling.summary_temperature - 1.0).abs() < 1e-12);
        assert!((config.factory.p_min - 0.01).abs() < 1e-12);
        assert_eq!(config.backend.max_in_flight, 4);
        assert_eq!(config.prompt.shot_mode, ShotMode::FewShot);
        assert_eq!(config.prompt.history_mode, HistoryMode::HistoryWithoutDemos);
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let parsed: RunConfig = serde_json::from_str(
            r#"{"backend": {"kind": "mock", "mock_script": "s.json"}, "factory": {"seed": 7}}"#,
        )
        .unwrap();
        assert_eq!(parsed.backend.kind, BackendKind::Mock);
        assert_eq!(parsed.factory.seed, Some(7));
        assert_eq!(parsed.paths.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut config = RunConfig::default();
        config.apply(&Overrides {
            seed: Some(9),
            p_min: Some(0.2),
            history_mode: Some(HistoryMode::NoHistory),
            ..Overrides::default()
        });
        assert_eq!(config.factory.seed, Some(9));
        assert!((config.factory.p_min - 0.2).abs() < 1e-12);
        assert_eq!(config.prompt.history_mode, HistoryMode::NoHistory);
    }

    #[test]
    fn mock_without_seed_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let question = dir.path().join("q.json");
        let responses = dir.path().join("r.jsonl");
        let script = dir.path().join("s.json");
        std::fs::write(&question, "{}").unwrap();
        std::fs::write(&responses, "").unwrap();
        std::fs::write(&script, r#"{"seed": 1}"#).unwrap();
        let mut config = RunConfig::default();
        config.paths.question = question;
        config.paths.responses = responses;
        config.backend.mock_script = Some(script);
        let err = config.validate_inputs(true).unwrap_err();
        assert!(err.to_string().contains("seed"));
        config.factory.seed = Some(1);
        config.validate_inputs(true).unwrap();
    }
}
