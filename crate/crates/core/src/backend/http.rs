//! Blocking client for OpenAI-compatible `/completions` endpoints.
//!
//! Response probabilities are `exp(sum of token logprobs)` of the completion.
//! Scoring a given continuation needs `echo` together with `logprobs`;
//! endpoints that cannot do this yield [`Error::Capability`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::prompt::{ConditionalModel, Response};
use crate::rng::{derive_seed, hash_str, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Full backoff before retry number `attempt` (0-based), scaled by a
    /// jitter factor in `[0.5, 1)`.
    pub fn backoff(&self, attempt: u32, jitter: f64) -> Duration {
        let base = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_micros((base as f64 * 1000.0 * (0.5 + 0.5 * jitter)) as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Endpoint root, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    /// Replaces the temperature requested by callers when set.
    pub temperature: Option<f64>,
    pub max_tokens: u32,
    /// Use the mean token logprob instead of the sum.
    pub length_normalize: bool,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: String::new(),
            api_key_env: None,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout_ms: 60_000,
            temperature: None,
            max_tokens: 64,
            length_normalize: false,
        }
    }
}

impl HttpBackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::InvalidArgument("max_in_flight must be >= 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::InvalidArgument("timeout_ms must be > 0".into()));
        }
        if self.base_url.is_empty() {
            return Err(Error::InvalidArgument("base_url is empty".into()));
        }
        if let Some(t) = self.temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "temperature must be >= 0, got {t}"
                )));
            }
        }
        Ok(())
    }
}

struct Slots {
    used: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    slots: Slots,
    next_id: AtomicU64,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::InvalidArgument(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            slots: Slots {
                used: Mutex::new(0),
                freed: Condvar::new(),
                max: config.max_in_flight,
            },
            config,
            agent,
            api_key,
            next_id: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, body: &Value) -> Result<CompletionBody> {
        let url = self.url();
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request_id = format!("epi-{:x}-{n}", std::process::id());
        let mut rng = rng_from_seed(derive_seed(hash_str(&request_id), 0));
        let fail = |status: Option<u16>, message: String| Error::Http {
            url: url.clone(),
            request_id: request_id.clone(),
            status,
            message,
        };
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _slot = self.slots.acquire();
                let mut req = self
                    .agent
                    .post(&url)
                    .header("X-Request-Id", &request_id)
                    .header("Content-Type", "application/json");
                if let Some(key) = &self.api_key {
                    req = req.header("Authorization", &format!("Bearer {key}"));
                }
                req.send_json(body).and_then(|mut resp| {
                    let status = resp.status().as_u16();
                    resp.body_mut().read_to_string().map(|text| (status, text))
                })
            };
            let retryable = match &outcome {
                Ok((status, _)) => *status == 429 || (500..600).contains(status),
                Err(_) => true,
            };
            if retryable && attempt < self.config.retry.max_retries {
                std::thread::sleep(self.config.retry.backoff(attempt, rng.random::<f64>()));
                attempt += 1;
                continue;
            }
            let (status, text) = outcome.map_err(|e| fail(None, e.to_string()))?;
            if !(200..300).contains(&status) {
                let lower = text.to_lowercase();
                if matches!(status, 400 | 422 | 501)
                    && (lower.contains("echo") || lower.contains("logprob"))
                {
                    return Err(Error::Capability(format!(
                        "endpoint rejected a logprob/echo request ({status}): {}; use the synthetic backend instead",
                        snippet(&text)
                    )));
                }
                return Err(fail(Some(status), snippet(&text)));
            }
            return serde_json::from_str(&text)
                .map_err(|e| Error::MalformedResponse(format!("request {request_id}: {e}")));
        }
    }

    fn temperature(&self, requested: f64) -> f64 {
        self.config.temperature.unwrap_or(requested)
    }

    fn to_prob(&self, logprobs: &[f64]) -> f64 {
        if logprobs.is_empty() {
            return 1.0;
        }
        let sum: f64 = logprobs.iter().sum();
        if self.config.length_normalize {
            (sum / logprobs.len() as f64).exp()
        } else {
            sum.exp()
        }
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

/// Log-probabilities of the tokens making up `text` up to its first newline,
/// together with the truncated text.
fn completion_logprobs(choice: &Choice) -> Result<(String, Vec<f64>)> {
    let cut = choice.text.find('\n').unwrap_or(choice.text.len());
    let text = choice.text[..cut].to_owned();
    let lp = choice
        .logprobs
        .as_ref()
        .and_then(|l| l.token_logprobs.as_ref())
        .ok_or_else(|| Error::MalformedResponse("choice has no token_logprobs".into()))?;
    let tokens = choice.logprobs.as_ref().and_then(|l| l.tokens.as_ref());
    let mut out = Vec::with_capacity(lp.len());
    match tokens {
        Some(tokens) => {
            if tokens.len() != lp.len() {
                return Err(Error::MalformedResponse(format!(
                    "{} tokens but {} logprobs",
                    tokens.len(),
                    lp.len()
                )));
            }
            let mut pos = 0usize;
            for (tok, l) in tokens.iter().zip(lp) {
                if pos >= cut {
                    break;
                }
                out.push(l.ok_or_else(|| Error::MalformedResponse("null token logprob".into()))?);
                pos += tok.len();
            }
        }
        None => {
            if cut < choice.text.len() {
                return Err(Error::MalformedResponse(
                    "cannot align logprobs with a multi-line completion without tokens".into(),
                ));
            }
            for l in lp {
                out.push(l.ok_or_else(|| Error::MalformedResponse("null token logprob".into()))?);
            }
        }
    }
    Ok((text, out))
}

impl ConditionalModel for HttpBackend {
    fn sample(&self, prompt: &str, k: usize, temperature: f64, seed: u64) -> Result<Vec<Response>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": self.temperature(temperature),
            "n": k,
            "logprobs": 1,
            "seed": seed,
            "stop": ["\n"],
        });
        let mut resp = self.post(&body)?;
        if resp.choices.len() != k {
            return Err(Error::MalformedResponse(format!(
                "asked for {k} choices, got {}",
                resp.choices.len()
            )));
        }
        resp.choices.sort_by_key(|c| c.index.unwrap_or(0));
        resp.choices
            .iter()
            .map(|c| {
                let (text, lp) = completion_logprobs(c)?;
                Ok(Response::new(text, self.to_prob(&lp)))
            })
            .collect()
    }

    fn probability(&self, prompt: &str, response: &str) -> Result<f64> {
        let full = format!("{prompt}{response}");
        let body = json!({
            "model": self.config.model,
            "prompt": full,
            "max_tokens": 0,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let resp = self.post(&body)?;
        let choice = resp
            .choices
            .first()
            .ok_or_else(|| Error::MalformedResponse("no choices".into()))?;
        let unsupported = || {
            Error::Capability(
                "endpoint does not echo prompt logprobs, so it cannot score a given continuation; \
                 use the synthetic backend instead"
                    .into(),
            )
        };
        let lp = choice.logprobs.as_ref().ok_or_else(unsupported)?;
        let offsets = lp.text_offset.as_ref().ok_or_else(unsupported)?;
        let values = lp.token_logprobs.as_ref().ok_or_else(unsupported)?;
        if !choice.text.starts_with(&full) || offsets.len() != values.len() {
            return Err(unsupported());
        }
        let start = prompt.chars().count();
        let end = start + response.chars().count();
        let tokens = lp.tokens.as_ref();
        let mut picked = Vec::new();
        for (i, (&off, l)) in offsets.iter().zip(values).enumerate() {
            let width = tokens
                .and_then(|t| t.get(i))
                .map_or(1, |t| t.chars().count().max(1));
            if off + width <= start || off >= end {
                continue;
            }
            picked.push(
                l.ok_or_else(|| Error::MalformedResponse("null continuation logprob".into()))?,
            );
        }
        Ok(self.to_prob(&picked))
    }
}
