//! OpenAI-compatible HTTP backend.
//!
//! Generation goes through `POST {endpoint}/chat/completions`. Forced-answer
//! scoring needs an endpoint that serves the legacy `POST {endpoint}/completions`
//! route with `echo` and per-token `logprobs` (vLLM and similar servers do);
//! it is only attempted when the config says the endpoint supports it.

use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{GeneratorConfig, GeneratorResponse, TokenLogprob, Usage};
use crate::error::{Error, Result};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        PermitGuard { permits: self }
    }
}

struct PermitGuard<'a> {
    permits: &'a Permits,
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.permits.free.lock() += 1;
        self.permits.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteClient {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    permits: Permits,
    max_retries: u32,
    backoff: Duration,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    index: usize,
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl RemoteClient {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .as_deref()
            .ok_or_else(|| Error::Config("remote backend requires an endpoint".into()))?
            .trim_end_matches('/')
            .to_string();
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            http,
            permits: Permits::new(config.concurrency.max(1)),
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
        })
    }

    fn post(&self, route: &str, body: &Value) -> Result<String> {
        let url = format!("{}/{}", self.endpoint, route);
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.permits.acquire();
                let mut req = self.http.post(&url).json(body);
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                req.send()
            };
            let resp = result.map_err(|e| Error::Transport {
                url: url.clone(),
                message: e.to_string(),
            })?;
            let status = resp.status();
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok());
            let text = resp.text().map_err(|e| Error::Transport {
                url: url.clone(),
                message: e.to_string(),
            })?;
            if status.is_success() {
                return Ok(text);
            }
            let retryable = status.as_u16() == 429 || status.is_server_error();
            if retryable && attempt < self.max_retries {
                let wait = retry_after
                    .map(Duration::from_secs)
                    .unwrap_or(self.backoff * 2u32.saturating_pow(attempt));
                warn!(%url, status = status.as_u16(), attempt, ?wait, "retrying request");
                std::thread::sleep(wait);
                attempt += 1;
                continue;
            }
            return Err(Error::Http {
                url,
                status: status.as_u16(),
                retry_after,
                body: text,
            });
        }
    }

    fn bad(&self, message: impl Into<String>) -> Error {
        Error::BadResponse {
            url: self.endpoint.clone(),
            message: message.into(),
        }
    }

    pub fn chat(&self, config: &GeneratorConfig, prompt: &str) -> Result<GeneratorResponse> {
        let mut body = json!({
            "model": config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        });
        if config.request_logprobs {
            body["logprobs"] = json!(true);
        }
        let text = self.post("chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| self.bad(format!("chat completion: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| self.bad("no choices"))?;
        let token_logprobs = choice.logprobs.and_then(|l| l.content);
        if let Some(lp) = &token_logprobs {
            if lp.iter().any(|t| !t.logprob.is_finite() || t.logprob > 0.0) {
                return Err(self.bad("token log-probabilities must be finite and <= 0"));
            }
        }
        debug!(model = %config.model, "chat completion received");
        Ok(GeneratorResponse {
            text: choice.message.content.unwrap_or_default().trim().to_string(),
            token_logprobs,
            usage: parsed.usage.unwrap_or_default(),
        })
    }

    /// Total log-probability of each continuation after `prompt`, one request for all of them.
    pub fn score_continuations(
        &self,
        config: &GeneratorConfig,
        prompt: &str,
        continuations: &[String],
    ) -> Result<Vec<f64>> {
        if !config.forced_scoring {
            return Err(Error::CapabilityUnsupported(format!(
                "endpoint {} is not configured for forced-answer scoring",
                self.endpoint
            )));
        }
        let prefix = format!("{prompt} ");
        let prompts: Vec<String> = continuations.iter().map(|c| format!("{prefix}{c}")).collect();
        let body = json!({
            "model": config.model,
            "prompt": prompts,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let text = self.post("completions", &body)?;
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| self.bad(format!("completion: {e}")))?;
        // offsets are character positions into the echoed prompt
        let start = prefix.chars().count();
        let mut out = vec![None; continuations.len()];
        for choice in parsed.choices {
            let end = start
                + continuations
                    .get(choice.index)
                    .ok_or_else(|| self.bad("choice index out of range"))?
                    .chars()
                    .count();
            let lp = choice
                .logprobs
                .ok_or_else(|| Error::CapabilityUnsupported("endpoint returned no echo logprobs".into()))?;
            let mut total = 0.0;
            for (off, p) in lp.text_offset.iter().zip(&lp.token_logprobs) {
                if *off >= start && *off < end {
                    let p = p.ok_or_else(|| self.bad("missing logprob for answer token"))?;
                    total += p;
                }
            }
            out[choice.index] = Some(total);
        }
        out.into_iter()
            .map(|v| v.ok_or_else(|| self.bad("missing choice for a continuation")))
            .collect()
    }

    /// One embedding vector per input, in input order.
    pub fn embeddings(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": model, "input": inputs });
        let text = self.post("embeddings", &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| self.bad(format!("embeddings: {e}")))?;
        let mut out = vec![None; inputs.len()];
        for item in parsed.data {
            let slot = out
                .get_mut(item.index)
                .ok_or_else(|| self.bad("embedding index out of range"))?;
            *slot = Some(item.embedding);
        }
        out.into_iter()
            .map(|v| v.ok_or_else(|| self.bad("missing embedding for an input")))
            .collect()
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}
