use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::cache::{CacheMode, CachedTransport};
use super::http::{ConcurrencyLimit, HttpTransport, RetryPolicy};
use super::openai::OpenAiProvider;
use super::scripted::ScriptedTransport;
use super::{Provider, Transport};
use crate::error::{Error, Result};

pub const DEFAULT_API_KEY_ENV: &str = "RAG2_API_KEY";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    #[default]
    Completions,
    Chat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Http,
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    /// Base URL of the server, e.g. `http://localhost:8000/v1`.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Scripted fixture (JSONL) when `kind = "scripted"`.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    pub model_name: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub api: ApiStyle,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_mode: CacheMode,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// In-flight request cap for this provider; the shared global limit when absent.
    #[serde(default)]
    pub concurrency: Option<usize>,
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_timeout_secs() -> f64 {
    120.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_batch() -> usize {
    256
}

impl ProviderConfig {
    pub fn http(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::Http,
            endpoint: Some(endpoint.into()),
            fixture: None,
            model_name: model_name.into(),
            api_key_env: default_api_key_env(),
            api: ApiStyle::default(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            cache_dir: None,
            cache_mode: CacheMode::default(),
            max_batch: default_max_batch(),
            concurrency: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return Err(Error::Config(format!("{}: timeout must be > 0", self.model_name)));
        }
        match self.kind {
            ProviderKind::Http if self.endpoint.is_none() => {
                Err(Error::Config(format!("{}: http provider needs an endpoint", self.model_name)))
            }
            ProviderKind::Scripted if self.fixture.is_none() => {
                Err(Error::Config(format!("{}: scripted provider needs a fixture", self.model_name)))
            }
            _ => Ok(()),
        }
    }
}

fn wrap<T: Transport + 'static>(transport: T, cfg: &ProviderConfig) -> Arc<dyn Provider> {
    let boxed: Box<dyn Transport> = match &cfg.cache_dir {
        Some(dir) => Box::new(CachedTransport::new(transport, dir).with_mode(cfg.cache_mode)),
        None => Box::new(transport),
    };
    Arc::new(
        OpenAiProvider::new(boxed, cfg.model_name.clone())
            .with_api(cfg.api)
            .with_max_batch(cfg.max_batch),
    )
}

/// Builds the provider a config describes: HTTP or scripted transport,
/// optionally behind the disk cache.
pub fn build_provider(cfg: &ProviderConfig) -> Result<Arc<dyn Provider>> {
    cfg.validate()?;
    match cfg.kind {
        ProviderKind::Http => {
            let api_key = std::env::var(&cfg.api_key_env).ok();
            let retry = RetryPolicy {
                max_retries: cfg.max_retries,
                ..RetryPolicy::default()
            };
            let mut transport = HttpTransport::new(
                cfg.endpoint.as_deref().unwrap_or_default(),
                api_key,
                Duration::from_secs_f64(cfg.timeout_secs),
                retry,
            );
            if let Some(n) = cfg.concurrency {
                transport = transport.with_limit(ConcurrencyLimit::new(n));
            }
            Ok(wrap(transport, cfg))
        }
        ProviderKind::Scripted => {
            let fixture = cfg.fixture.as_deref().expect("validated above");
            Ok(wrap(ScriptedTransport::from_jsonl(fixture)?, cfg))
        }
    }
}
