//! Uniform access to the generator: a remote OpenAI-compatible endpoint or the
//! deterministic simulated world, both behind one response cache.

mod cache;
mod remote;
mod sim;
mod template;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use cache::{cache_key, ResponseCache};
pub use remote::RemoteClient;
pub use sim::{sim_exact_utility, FactTag, SimQuery, SimWorld, SubsetView, UtilityMode};
pub use template::{PromptTemplate, DEFAULT_TEMPLATE};

use crate::error::{Error, Result};
use crate::types::{AnswerSet, ContextList, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Remote,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub template: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Endpoint serves `/completions` with `echo` + `logprobs`.
    pub forced_scoring: bool,
    pub request_logprobs: bool,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Simulated backend: log-probability charged per token of a wrong answer.
    pub sim_penalty_per_token: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Simulated,
            endpoint: None,
            model: "sim".into(),
            template: DEFAULT_TEMPLATE.into(),
            temperature: 0.0,
            max_tokens: 32,
            concurrency: 4,
            cache_dir: None,
            api_key_env: "OPENAI_API_KEY".into(),
            forced_scoring: false,
            request_logprobs: false,
            max_retries: 4,
            backoff_ms: 500,
            timeout_secs: 120,
            sim_penalty_per_token: -10.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.concurrency < 1 {
            return Err(Error::Config("concurrency limit must be >= 1".into()));
        }
        if self.backend == BackendKind::Remote && self.endpoint.is_none() {
            return Err(Error::Config("remote backend requires an endpoint".into()));
        }
        PromptTemplate::by_id(&self.template)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub usage: Usage,
}

/// Call counters. `generate_calls` and `score_calls` count logical calls,
/// whether or not they were served from the cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub generate_calls: u64,
    pub score_calls: u64,
    pub cache_hits: u64,
    pub backend_requests: u64,
}

impl GatewayStats {
    pub fn utility_calls(&self) -> u64 {
        self.generate_calls + self.score_calls
    }
}

#[derive(Debug)]
enum Backend {
    /// World plus a digest of its full contents, used in cache keys.
    Simulated(Arc<SimWorld>, String),
    Remote(RemoteClient),
}

#[derive(Debug, Default)]
struct Counters {
    generate: AtomicU64,
    score: AtomicU64,
    hits: AtomicU64,
    requests: AtomicU64,
}

/// Thread-safe handle to the configured generator.
#[derive(Debug)]
pub struct Gateway {
    config: GeneratorConfig,
    template: PromptTemplate,
    backend: Backend,
    cache: ResponseCache,
    counters: Counters,
}

fn whitespace_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl Gateway {
    pub fn simulated(config: GeneratorConfig, world: SimWorld) -> Result<Self> {
        world.validate()?;
        let digest = cache_key(&world);
        Self::build(config, Backend::Simulated(Arc::new(world), digest))
    }

    pub fn remote(config: GeneratorConfig) -> Result<Self> {
        let client = RemoteClient::new(&config)?;
        Self::build(config, Backend::Remote(client))
    }

    /// Builds the backend named in the config; the simulated backend needs a world.
    pub fn from_config(config: GeneratorConfig, world: Option<SimWorld>) -> Result<Self> {
        match config.backend {
            BackendKind::Remote => Self::remote(config),
            BackendKind::Simulated => {
                let world = world.ok_or_else(|| Error::Config("simulated backend requires a world".into()))?;
                Self::simulated(config, world)
            }
        }
    }

    fn build(config: GeneratorConfig, backend: Backend) -> Result<Self> {
        config.validate()?;
        let template = PromptTemplate::by_id(&config.template)?;
        let cache = ResponseCache::new(config.cache_dir.clone())?;
        Ok(Self {
            config,
            template,
            backend,
            cache,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn world(&self) -> Option<&SimWorld> {
        match &self.backend {
            Backend::Simulated(w, _) => Some(w),
            Backend::Remote(_) => None,
        }
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            generate_calls: self.counters.generate.load(Ordering::SeqCst),
            score_calls: self.counters.score.load(Ordering::SeqCst),
            cache_hits: self.counters.hits.load(Ordering::SeqCst),
            backend_requests: self.counters.requests.load(Ordering::SeqCst),
        }
    }

    pub fn render_prompt(&self, query: &Query, contexts: &ContextList) -> String {
        self.template.render(query, contexts)
    }

    fn key_material(&self, op: &str, query: &Query, contexts: &ContextList, prompt: &str) -> serde_json::Value {
        let mut m = json!({
            "op": op,
            "model": self.config.model,
            "template": self.template.id(),
            "prompt": prompt,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "logprobs": self.config.request_logprobs,
        });
        if let Backend::Simulated(_, digest) = &self.backend {
            // the simulated answer depends on ids, not on rendered text
            m["sim"] = json!({
                "world": digest,
                "query": query.id,
                "contexts": contexts.ids().collect::<Vec<_>>(),
                "penalty": self.config.sim_penalty_per_token,
            });
        }
        m
    }

    fn cached<F>(&self, material: &serde_json::Value, fetch: F) -> Result<Arc<str>>
    where
        F: FnOnce() -> Result<String>,
    {
        let key = cache_key(material);
        let (body, hit) = self.cache.get_or_fetch(&key, || {
            self.counters.requests.fetch_add(1, Ordering::SeqCst);
            fetch()
        })?;
        if hit {
            self.counters.hits.fetch_add(1, Ordering::SeqCst);
        }
        Ok(body)
    }

    /// Runs the generator on `template(query, contexts)`.
    pub fn generate(&self, query: &Query, contexts: &ContextList) -> Result<GeneratorResponse> {
        self.counters.generate.fetch_add(1, Ordering::SeqCst);
        let prompt = self.render_prompt(query, contexts);
        let material = self.key_material("generate", query, contexts, &prompt);
        let body = self.cached(&material, || {
            let resp = match &self.backend {
                Backend::Simulated(world, _) => {
                    let text = world.respond(&query.id, contexts.ids())?;
                    GeneratorResponse {
                        usage: Usage {
                            prompt_tokens: whitespace_tokens(&prompt),
                            completion_tokens: whitespace_tokens(&text),
                        },
                        text,
                        token_logprobs: None,
                    }
                }
                Backend::Remote(client) => client.chat(&self.config, &prompt)?,
            };
            Ok(serde_json::to_string(&resp).expect("response serializes"))
        })?;
        serde_json::from_str(&body).map_err(|e| Error::BadResponse {
            url: "cache".into(),
            message: e.to_string(),
        })
    }

    fn score_all(&self, query: &Query, contexts: &ContextList, answers: &[String]) -> Result<Vec<f64>> {
        let prompt = self.render_prompt(query, contexts);
        let mut material = self.key_material("score", query, contexts, &prompt);
        material["answers"] = json!(answers);
        let body = self.cached(&material, || {
            let scores = match &self.backend {
                Backend::Simulated(world, _) => answers
                    .iter()
                    .map(|a| world.forced_score(&query.id, contexts.ids(), a, self.config.sim_penalty_per_token))
                    .collect::<Result<Vec<f64>>>()?,
                Backend::Remote(client) => client.score_continuations(&self.config, &prompt, answers)?,
            };
            Ok(serde_json::to_string(&scores).expect("scores serialize"))
        })?;
        serde_json::from_str(&body).map_err(|e| Error::BadResponse {
            url: "cache".into(),
            message: e.to_string(),
        })
    }

    /// Total log-probability of `answer` as the continuation of the prompt.
    /// Cross-entropy is its negation.
    pub fn score_answer(&self, query: &Query, contexts: &ContextList, answer: &str) -> Result<f64> {
        self.counters.score.fetch_add(1, Ordering::SeqCst);
        Ok(self.score_all(query, contexts, &[answer.to_string()])?[0])
    }

    /// Maximum forced-answer log-probability over the aliases, as one logical call.
    pub fn score_best_alias(&self, query: &Query, contexts: &ContextList, answers: &AnswerSet) -> Result<f64> {
        self.counters.score.fetch_add(1, Ordering::SeqCst);
        let scores = self.score_all(query, contexts, &answers.answers)?;
        scores
            .into_iter()
            .reduce(f64::max)
            .ok_or_else(|| Error::invariant("answers", "answer set is empty"))
    }
}
