//! Engine configuration: one TOML document with `${VAR}` interpolation,
//! validated field by field, plus construction of the runtime services.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vdr_core::sim::{SimWorld, WorldSpec};
use vdr_core::{Budgets, ByteQuarterCounter, MaskRule, RepetitionParams};

use crate::agent::SharedCounter;
use crate::error::ConfigError;
use crate::forge::{DatasetMix, KnowledgeSource, WebKnowledge};
use crate::gateway::{ChatModel, HttpTransport, ModelClient, ModelEndpoint};
use crate::live::{LiveToolBackend, SearchApi};
use crate::prompts::Prompts;
use crate::rollout::{RolloutMode, RolloutSettings};
use crate::sim_agents::SimModels;
use crate::tools::{SimToolBackend, ToolBackend};
use crate::vision::VisionConfig;

pub const MODEL_KEY_VAR: &str = "VDR_MODEL_API_KEY";
pub const JUDGE_KEY_VAR: &str = "VDR_JUDGE_API_KEY";
pub const SEARCH_KEY_VAR: &str = "VDR_SEARCH_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Sim,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    pub concurrency: usize,
    pub tool_pool_size: usize,
    pub tool_timeout_ms: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { mode: RolloutMode::CisTs, concurrency: 16, tool_pool_size: 32, tool_timeout_ms: 60_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafeguardConfig {
    pub error_limit: u32,
    pub repetition: RepetitionParams,
}

impl Default for SafeguardConfig {
    fn default() -> Self {
        Self { error_limit: 3, repetition: RepetitionParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub group_size: usize,
    pub mask: MaskRule,
    /// Zero the reward of trajectories containing format errors.
    pub format_penalty: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { group_size: 8, mask: MaskRule::default(), format_penalty: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Probability that a simulated model makes a wrong visual choice.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub policy: Option<ModelEndpoint>,
    /// Region proposals, descriptions and curation; falls back to `policy`.
    pub mllm: Option<ModelEndpoint>,
    pub foundation: Option<ModelEndpoint>,
    pub judge: Option<ModelEndpoint>,
    pub selector: Option<ModelEndpoint>,
    pub summarizer: Option<ModelEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub backend: BackendKind,
    pub seed: u64,
    pub budgets: Budgets,
    pub vision: VisionConfig,
    pub rollout: RolloutConfig,
    pub safeguards: SafeguardConfig,
    pub rl: RlConfig,
    pub mix: DatasetMix,
    pub world: WorldSpec,
    pub sim: SimConfig,
    pub endpoints: Endpoints,
    pub search: Option<SearchApi>,
    pub prompts_dir: Option<PathBuf>,
    pub code_timeout_ms: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Sim,
            seed: 0,
            budgets: Budgets::default(),
            vision: VisionConfig::default(),
            rollout: RolloutConfig::default(),
            safeguards: SafeguardConfig::default(),
            rl: RlConfig::default(),
            mix: DatasetMix::default(),
            world: WorldSpec::default(),
            sim: SimConfig::default(),
            endpoints: Endpoints::default(),
            search: None,
            prompts_dir: None,
            code_timeout_ms: 10_000,
        }
    }
}

/// Replaces `${NAME}` with `lookup(NAME)`; `$$` escapes a dollar sign.
pub fn interpolate(s: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let tail = &rest[i + 1..];
        if let Some(t) = tail.strip_prefix('$') {
            out.push('$');
            rest = t;
        } else if let Some(t) = tail.strip_prefix('{') {
            let end = t.find('}').ok_or_else(|| "unterminated ${...}".to_string())?;
            let name = &t[..end];
            let value = lookup(name).ok_or_else(|| format!("environment variable {name} is not set"))?;
            out.push_str(&value);
            rest = &t[end + 1..];
        } else {
            out.push('$');
            rest = tail;
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(
    v: &mut toml::Value,
    path: &str,
    lookup: &dyn Fn(&str) -> Option<String>,
    problems: &mut Vec<String>,
) {
    match v {
        toml::Value::String(s) => match interpolate(s, lookup) {
            Ok(r) => *s = r,
            Err(e) => problems.push(format!("{path}: {e}")),
        },
        toml::Value::Array(items) => {
            for (i, item) in items.iter_mut().enumerate() {
                interpolate_value(item, &format!("{path}[{i}]"), lookup, problems);
            }
        }
        toml::Value::Table(t) => {
            for (k, item) in t.iter_mut() {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                interpolate_value(item, &p, lookup, problems);
            }
        }
        _ => {}
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, &|k| std::env::var(k).ok(), None)
    }

    /// Parses, interpolates and validates. Relative `prompts_dir` resolves against `base`.
    pub fn from_toml_with(
        text: &str,
        lookup: &dyn Fn(&str) -> Option<String>,
        base: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::one(format!("syntax: {e}")))?;
        let mut problems = Vec::new();
        for (k, v) in doc.iter_mut() {
            interpolate_value(v, k, lookup, &mut problems);
        }
        if !problems.is_empty() {
            return Err(ConfigError { problems });
        }
        // Round-trip through text so type errors carry the offending key.
        let resolved = toml::to_string(&doc).map_err(|e| ConfigError::one(e.to_string()))?;
        let mut cfg: EngineConfig = toml::from_str(&resolved).map_err(|e| ConfigError::one(e.message().to_string()))?;
        if let (Some(base), Some(dir)) = (base, cfg.prompts_dir.as_ref()) {
            if dir.is_relative() {
                cfg.prompts_dir = Some(base.join(dir));
            }
        }
        cfg.apply_env_keys(lookup);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::one(format!("config: cannot read {}: {e}", path.display())))?;
        Self::from_toml_with(&text, &|k| std::env::var(k).ok(), path.parent())
    }

    /// Fills missing API keys from the environment.
    fn apply_env_keys(&mut self, lookup: &dyn Fn(&str) -> Option<String>) {
        let e = &mut self.endpoints;
        for (ep, var) in [
            (&mut e.policy, MODEL_KEY_VAR),
            (&mut e.mllm, MODEL_KEY_VAR),
            (&mut e.foundation, MODEL_KEY_VAR),
            (&mut e.selector, MODEL_KEY_VAR),
            (&mut e.summarizer, MODEL_KEY_VAR),
            (&mut e.judge, JUDGE_KEY_VAR),
        ] {
            if let Some(ep) = ep {
                if ep.api_key.is_none() {
                    ep.api_key = lookup(var);
                }
            }
        }
        if let Some(s) = &mut self.search {
            if s.api_key.is_none() {
                s.api_key = lookup(SEARCH_KEY_VAR);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        if self.budgets.max_turns == 0 {
            p.push("budgets.max_turns: must be at least 1".to_string());
        }
        if self.budgets.max_context_tokens == 0 {
            p.push("budgets.max_context_tokens: must be at least 1".to_string());
        }
        if self.budgets.max_turn_tokens == 0 {
            p.push("budgets.max_turn_tokens: must be at least 1".to_string());
        }
        if self.budgets.max_turn_tokens > self.budgets.max_context_tokens {
            p.push("budgets.max_turn_tokens: must not exceed max_context_tokens".to_string());
        }
        if self.vision.scales.is_empty() {
            p.push("vision.scales: must not be empty".to_string());
        }
        if self.vision.scales.iter().any(|s| !s.is_finite() || *s < 1.0) {
            p.push("vision.scales: every scale must be finite and at least 1.0".to_string());
        }
        if self.vision.max_regions == 0 {
            p.push("vision.max_regions: must be at least 1".to_string());
        }
        if self.vision.turn_cap == 0 {
            p.push("vision.turn_cap: must be at least 1".to_string());
        }
        if self.rollout.concurrency == 0 {
            p.push("rollout.concurrency: must be at least 1".to_string());
        }
        if self.rollout.tool_pool_size == 0 {
            p.push("rollout.tool_pool_size: must be at least 1".to_string());
        }
        if self.rollout.tool_timeout_ms == 0 {
            p.push("rollout.tool_timeout_ms: must be positive".to_string());
        }
        if self.safeguards.error_limit == 0 {
            p.push("safeguards.error_limit: must be at least 1".to_string());
        }
        let r = &self.safeguards.repetition;
        if r.ngram == 0 || r.min_repeats < 2 {
            p.push("safeguards.repetition: ngram must be at least 1 and min_repeats at least 2".to_string());
        }
        if self.rl.group_size < 2 {
            p.push("rl.group_size: must be at least 2".to_string());
        }
        if !(0.0..=1.0).contains(&self.rl.mask.error_step_fraction) {
            p.push("rl.mask.error_step_fraction: must be within [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.sim.noise) {
            p.push("sim.noise: must be within [0, 1]".to_string());
        }
        let w = &self.world;
        if w.n_entities == 0 || w.n_pages == 0 {
            p.push("world: n_entities and n_pages must be at least 1".to_string());
        }
        if !(w.hit_fraction > 0.0 && w.hit_fraction <= 1.0) {
            p.push("world.hit_fraction: must be within (0, 1]".to_string());
        }
        if self.code_timeout_ms == 0 {
            p.push("code_timeout_ms: must be positive".to_string());
        }
        if let Some(dir) = &self.prompts_dir {
            if !dir.is_dir() {
                p.push(format!("prompts_dir: {} is not a directory", dir.display()));
            }
        }
        let e = &self.endpoints;
        for (name, ep) in [
            ("policy", &e.policy),
            ("mllm", &e.mllm),
            ("foundation", &e.foundation),
            ("judge", &e.judge),
            ("selector", &e.selector),
            ("summarizer", &e.summarizer),
        ] {
            if let Some(ep) = ep {
                p.extend(ep.problems().into_iter().map(|m| format!("endpoints.{name}.{m}")));
            }
        }
        if self.backend == BackendKind::Live {
            for (name, ep, var) in [
                ("policy", &e.policy, MODEL_KEY_VAR),
                ("foundation", &e.foundation, MODEL_KEY_VAR),
                ("judge", &e.judge, JUDGE_KEY_VAR),
                ("selector", &e.selector, MODEL_KEY_VAR),
                ("summarizer", &e.summarizer, MODEL_KEY_VAR),
            ] {
                match ep {
                    None => p.push(format!("endpoints.{name}: required for the live backend")),
                    Some(ep) if ep.api_key.is_none() => {
                        p.push(format!("endpoints.{name}.api_key: required for the live backend (or set {var})"))
                    }
                    Some(_) => {}
                }
            }
            match &self.search {
                None => p.push("search: required for the live backend".to_string()),
                Some(s) if s.base_url.trim().is_empty() => p.push("search.base_url: must not be empty".to_string()),
                Some(s) if s.api_key.is_none() => {
                    p.push(format!("search.api_key: required for the live backend (or set {SEARCH_KEY_VAR})"))
                }
                Some(_) => {}
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: p })
        }
    }

    pub fn rollout_settings(&self) -> RolloutSettings {
        RolloutSettings {
            repetition: self.safeguards.repetition,
            error_limit: self.safeguards.error_limit,
            seed: self.seed,
            tool_timeout: Duration::from_millis(self.rollout.tool_timeout_ms),
        }
    }

    /// Builds models, tools and prompts. Must run inside a tokio runtime.
    pub fn services(&self) -> Result<Services, ConfigError> {
        let prompts = Arc::new(
            Prompts::load(self.prompts_dir.as_deref())
                .map_err(|e| ConfigError::one(format!("prompts_dir: {e}")))?,
        );
        let counter: SharedCounter = Arc::new(ByteQuarterCounter);
        match self.backend {
            BackendKind::Sim => {
                let world = Arc::new(self.world.build());
                let models: Arc<dyn ChatModel> = Arc::new(SimModels::new(world.clone(), self.sim.noise));
                let backend: Arc<dyn ToolBackend> = Arc::new(SimToolBackend::new(world.clone()));
                Ok(Services {
                    policy: models.clone(),
                    mllm: models.clone(),
                    foundation: models.clone(),
                    judge: models.clone(),
                    selector: models.clone(),
                    writer: models,
                    knowledge: Arc::new(WebKnowledge::new(backend.clone())),
                    backend,
                    prompts,
                    counter,
                    world: Some(world),
                })
            }
            BackendKind::Live => {
                let e = &self.endpoints;
                let client = |ep: &Option<ModelEndpoint>, name: &str| -> Result<Arc<dyn ChatModel>, ConfigError> {
                    let ep = ep.clone().ok_or_else(|| ConfigError::one(format!("endpoints.{name}: missing")))?;
                    Ok(Arc::new(ModelClient::new(ep, HttpTransport::new())))
                };
                let policy = client(&e.policy, "policy")?;
                let mllm = match &e.mllm {
                    Some(_) => client(&e.mllm, "mllm")?,
                    None => policy.clone(),
                };
                let foundation = client(&e.foundation, "foundation")?;
                let judge = client(&e.judge, "judge")?;
                let selector = client(&e.selector, "selector")?;
                let summarizer = client(&e.summarizer, "summarizer")?;
                let search = self.search.clone().ok_or_else(|| ConfigError::one("search: missing"))?;
                let backend: Arc<dyn ToolBackend> = Arc::new(LiveToolBackend::new(
                    search,
                    summarizer,
                    prompts.clone(),
                    Duration::from_millis(self.code_timeout_ms),
                ));
                Ok(Services {
                    policy,
                    mllm,
                    writer: foundation.clone(),
                    foundation,
                    judge,
                    selector,
                    knowledge: Arc::new(WebKnowledge::new(backend.clone())),
                    backend,
                    prompts,
                    counter,
                    world: None,
                })
            }
        }
    }
}

/// Everything a pipeline needs at run time.
#[derive(Clone)]
pub struct Services {
    pub policy: Arc<dyn ChatModel>,
    pub mllm: Arc<dyn ChatModel>,
    /// Text-only model for the text phase.
    pub foundation: Arc<dyn ChatModel>,
    pub judge: Arc<dyn ChatModel>,
    pub selector: Arc<dyn ChatModel>,
    pub writer: Arc<dyn ChatModel>,
    pub backend: Arc<dyn ToolBackend>,
    pub knowledge: Arc<dyn KnowledgeSource>,
    pub prompts: Arc<Prompts>,
    pub counter: SharedCounter,
    /// Present for the sim backend.
    pub world: Option<Arc<SimWorld>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(k: &str) -> Option<String> {
        match k {
            "KEY" => Some("secret".into()),
            _ => None,
        }
    }

    #[test]
    fn interpolation() {
        assert_eq!(interpolate("a ${KEY} $$ b$", &env).unwrap(), "a secret $ b$");
        assert!(interpolate("${MISSING}", &env).unwrap_err().contains("MISSING"));
        assert!(interpolate("${KEY", &env).is_err());
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(EngineConfig::from_toml_with("", &env, None).unwrap(), EngineConfig::default());
    }

    #[test]
    fn field_level_errors() {
        let err = EngineConfig::from_toml_with("[rollout]\nconcurrency = 0\n[rl]\ngroup_size = 1\n", &env, None).unwrap_err();
        assert!(err.problems.iter().any(|p| p.starts_with("rollout.concurrency")));
        assert!(err.problems.iter().any(|p| p.starts_with("rl.group_size")));
        let err = EngineConfig::from_toml_with("[rollout]\nconcurency = 3\n", &env, None).unwrap_err();
        assert!(err.problems[0].contains("concurency"));
    }

    #[test]
    fn live_backend_needs_keys() {
        let err = EngineConfig::from_toml_with("backend = \"live\"\n", &env, None).unwrap_err();
        assert!(err.problems.iter().any(|p| p.starts_with("endpoints.policy")));
        assert!(err.problems.iter().any(|p| p.starts_with("search")));
        let text = r#"
backend = "live"
[endpoints.policy]
base_url = "http://x"
model_name = "m"
api_key = "${KEY}"
"#;
        let err = EngineConfig::from_toml_with(text, &env, None).unwrap_err();
        assert!(!err.problems.iter().any(|p| p.starts_with("endpoints.policy")));
        let with_env = |k: &str| (k == JUDGE_KEY_VAR).then(|| "j".to_string());
        let text = "backend = \"live\"\n[endpoints.judge]\nbase_url = \"http://x\"\nmodel_name = \"m\"\n";
        let err = EngineConfig::from_toml_with(text, &with_env, None).unwrap_err();
        assert!(!err.problems.iter().any(|p| p.starts_with("endpoints.judge")));
    }
}
