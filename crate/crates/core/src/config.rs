//! Service configuration.
//!
//! Loaded from a TOML or JSON file; relative paths resolve against the file's
//! directory. Command-line flags override the file and `KGNAV_*` environment
//! variables override both.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayMode, HttpChatBackend, LlmGateway, ModeKind};
use crate::grounding::{
    Embedder, EmbeddingProvider, FixtureProvider, Grounder, HttpProvider, MatcherConfig, NodeIndex,
};
use crate::kg::KnowledgeGraph;
use crate::pipeline::{Clock, Engine, SystemClock};
use crate::session::{FileStore, MemoryStore, SessionStore};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for {key}: {value:?}")]
    InvalidValue { key: String, value: String },
    #[error("{0} does not exist")]
    MissingPath(String),
    #[error("{0}")]
    Invalid(String),
    #[error("startup failed: {0}")]
    Startup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// `fixture` or `http`.
    pub provider: String,
    /// Vector table for the fixture provider; without one, every term uses the hash fallback.
    pub table: Option<PathBuf>,
    pub dimension: usize,
    pub seed: u64,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// Sidecar file caching node-label embeddings.
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: "fixture".into(),
            table: None,
            dimension: 64,
            seed: 7,
            base_url: None,
            model: None,
            api_key_env: None,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: ModeKind,
    pub fixtures_dir: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            mode: ModeKind::Replay,
            fixtures_dir: None,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub kg_path: PathBuf,
    pub listen: String,
    /// Directory for session files; sessions stay in memory when unset.
    pub store_path: Option<PathBuf>,
    pub recommendations: usize,
    pub matcher: MatcherConfig,
    pub embeddings: EmbeddingConfig,
    pub llm: LlmConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            kg_path: PathBuf::from("fixtures/kg/mini.jsonl"),
            listen: "127.0.0.1:8080".into(),
            store_path: None,
            recommendations: crate::pipeline::DEFAULT_RECOMMENDATIONS,
            matcher: MatcherConfig::default(),
            embeddings: EmbeddingConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::InvalidValue { key: key.into(), value: value.into() })
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: shown.clone(), source })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg: ServiceConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path: shown, message: e.to_string() })?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: shown, message: e.to_string() })?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.kg_path);
        for p in
            [&mut self.store_path, &mut self.embeddings.table, &mut self.embeddings.cache, &mut self.llm.fixtures_dir]
                .into_iter()
                .flatten()
        {
            resolve(base, p);
        }
    }

    /// Applies `KGNAV_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var("KGNAV_KG_PATH") {
            self.kg_path = v.into();
        }
        if let Some(v) = var("KGNAV_THETA_N") {
            self.matcher.theta_n = parse_value("KGNAV_THETA_N", &v)?;
        }
        if let Some(v) = var("KGNAV_THETA_R") {
            self.matcher.theta_r = parse_value("KGNAV_THETA_R", &v)?;
        }
        if let Some(v) = var("KGNAV_MODE") {
            self.llm.mode = v.parse().map_err(|_| ConfigError::InvalidValue { key: "KGNAV_MODE".into(), value: v })?;
        }
        if let Some(v) = var("KGNAV_FIXTURES_DIR") {
            self.llm.fixtures_dir = Some(v.into());
        }
        if let Some(v) = var("KGNAV_STORE_PATH") {
            self.store_path = Some(v.into());
        }
        if let Some(v) = var("KGNAV_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = var("KGNAV_LLM_BASE_URL") {
            self.llm.base_url = v;
        }
        if let Some(v) = var("KGNAV_LLM_MODEL") {
            self.llm.model = v;
        }
        if let Some(v) = var("KGNAV_EMBEDDINGS_TABLE") {
            self.embeddings.table = Some(v.into());
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<(), ConfigError> {
        self.apply_env(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.matcher.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.kg_path.exists() {
            return Err(ConfigError::MissingPath(self.kg_path.display().to_string()));
        }
        if let Some(t) = &self.embeddings.table {
            if !t.exists() {
                return Err(ConfigError::MissingPath(t.display().to_string()));
            }
        }
        match self.embeddings.provider.as_str() {
            "fixture" => {}
            "http" if self.embeddings.base_url.is_some() && self.embeddings.model.is_some() => {}
            "http" => return Err(ConfigError::Invalid("http embeddings need base_url and model".into())),
            other => return Err(ConfigError::InvalidValue { key: "embeddings.provider".into(), value: other.into() }),
        }
        if matches!(self.llm.mode, ModeKind::Replay | ModeKind::Record) && self.llm.fixtures_dir.is_none() {
            return Err(ConfigError::Invalid("replay and record modes need llm.fixtures_dir".into()));
        }
        if self.llm.mode == ModeKind::Replay {
            let dir = self.llm.fixtures_dir.as_ref().expect("checked above");
            if !dir.is_dir() {
                return Err(ConfigError::MissingPath(dir.display().to_string()));
            }
        }
        Ok(())
    }

    pub fn load_graph(&self) -> Result<KnowledgeGraph, ConfigError> {
        KnowledgeGraph::load(&self.kg_path)
            .map_err(|e| ConfigError::Startup(format!("{}: {e}", self.kg_path.display())))
    }

    pub fn build_embedder(&self) -> Result<Embedder, ConfigError> {
        let startup = |e: crate::grounding::GroundingError| ConfigError::Startup(e.to_string());
        let e = &self.embeddings;
        let provider: Arc<dyn EmbeddingProvider> = match e.provider.as_str() {
            "http" => {
                let key = e.api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
                Arc::new(
                    HttpProvider::new(
                        e.base_url.as_deref().unwrap_or_default(),
                        e.model.as_deref().unwrap_or_default(),
                        key,
                        Duration::from_secs(self.llm.timeout_secs),
                    )
                    .map_err(startup)?,
                )
            }
            _ => match &e.table {
                Some(table) => Arc::new(FixtureProvider::load(table).map_err(startup)?),
                None => Arc::new(FixtureProvider::hashed(e.dimension, e.seed)),
            },
        };
        Ok(Embedder::new(provider))
    }

    pub fn build_grounder(&self) -> Result<Grounder, ConfigError> {
        let startup = |e: crate::grounding::GroundingError| ConfigError::Startup(e.to_string());
        let graph = Arc::new(self.load_graph()?);
        let embedder = Arc::new(self.build_embedder()?);
        let index = match &self.embeddings.cache {
            Some(path) => NodeIndex::load_or_build(&graph, &embedder, path).map_err(startup)?,
            None => NodeIndex::build(&graph, &embedder).map_err(startup)?,
        };
        Grounder::with_index(graph, Arc::new(index), embedder, self.matcher).map_err(startup)
    }

    pub fn build_gateway(&self) -> Result<LlmGateway, ConfigError> {
        let l = &self.llm;
        let live = || -> Result<HttpChatBackend, ConfigError> {
            let key = std::env::var(&l.api_key_env)
                .map_err(|_| ConfigError::Invalid(format!("live LLM access needs ${} to be set", l.api_key_env)))?;
            HttpChatBackend::new(&l.base_url, &l.model, key, Duration::from_secs(l.timeout_secs))
                .map_err(|e| ConfigError::Startup(e.to_string()))
        };
        let fixtures =
            || l.fixtures_dir.clone().ok_or_else(|| ConfigError::Invalid("llm.fixtures_dir is not set".into()));
        let mode = match l.mode {
            ModeKind::Replay => GatewayMode::Replay { fixtures: fixtures()? },
            ModeKind::Live => GatewayMode::Live(Box::new(live()?)),
            ModeKind::Record => GatewayMode::Record { backend: Box::new(live()?), fixtures: fixtures()? },
        };
        Ok(LlmGateway::new(mode))
    }

    pub fn build_store(&self) -> Result<Box<dyn SessionStore>, ConfigError> {
        match &self.store_path {
            Some(p) => Ok(Box::new(FileStore::open(p).map_err(|e| ConfigError::Startup(e.to_string()))?)),
            None => Ok(Box::new(MemoryStore::new())),
        }
    }

    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        self.build_engine_with_clock(Arc::new(SystemClock))
    }

    pub fn build_engine_with_clock(&self, clock: Arc<dyn Clock>) -> Result<Engine, ConfigError> {
        self.validate()?;
        let grounder = Arc::new(self.build_grounder()?);
        Ok(Engine::new(grounder, self.build_gateway()?, self.build_store()?, clock)
            .with_recommendation_count(self.recommendations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.toml");
        std::fs::write(
            &path,
            "kg_path = \"kg/mini.jsonl\"\nstore_path = \"/abs/sessions\"\n[matcher]\ntheta_n = 0.9\n[llm]\nmode = \"replay\"\nfixtures_dir = \"llm\"\n",
        )
        .unwrap();
        let cfg = ServiceConfig::load(&path).unwrap();
        assert_eq!(cfg.kg_path, dir.path().join("kg/mini.jsonl"));
        assert_eq!(cfg.store_path, Some(PathBuf::from("/abs/sessions")));
        assert_eq!(cfg.llm.fixtures_dir, Some(dir.path().join("llm")));
        assert_eq!(cfg.matcher.theta_n, 0.9);
        assert_eq!(cfg.matcher.theta_r, 0.94);
    }

    #[test]
    fn json_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.json");
        std::fs::write(&path, r#"{"listen": "0.0.0.0:9000"}"#).unwrap();
        assert_eq!(ServiceConfig::load(&path).unwrap().listen, "0.0.0.0:9000");
        std::fs::write(&path, r#"{"lisen": "x"}"#).unwrap();
        assert!(matches!(ServiceConfig::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn env_overrides() {
        let env: HashMap<&str, &str> =
            HashMap::from([("KGNAV_THETA_R", "0.5"), ("KGNAV_MODE", "live"), ("KGNAV_LISTEN", "[::1]:1")]);
        let mut cfg = ServiceConfig::default();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.matcher.theta_r, 0.5);
        assert_eq!(cfg.llm.mode, ModeKind::Live);
        assert_eq!(cfg.listen, "[::1]:1");

        let bad = |k: &str| (k == "KGNAV_THETA_N").then(|| "high".to_string());
        assert!(matches!(cfg.apply_env(bad), Err(ConfigError::InvalidValue { .. })));
    }

    #[test]
    fn validation_catches_missing_inputs() {
        let cfg = ServiceConfig { kg_path: "/nonexistent/kg.jsonl".into(), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(ConfigError::MissingPath(_))));
        let mut cfg = ServiceConfig::default();
        cfg.matcher.theta_r = 1.5;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }
}
