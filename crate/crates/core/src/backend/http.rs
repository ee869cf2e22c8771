//! Verbalizer scoring against a completion endpoint that echoes prompt
//! log-probabilities (OpenAI-style `/v1/completions` with `echo: true`,
//! `max_tokens: 0`, `logprobs: 1`).
//!
//! Each label is scored by teacher-forcing `prompt + gap + verbalizer` and
//! summing the log-probabilities of the tokens past the prompt; the label
//! scores are then softmax-normalized over the label set.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, PromptTemplate};
use crate::domain::{Exemplar, ProbDist};
use crate::error::{CalibError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScoring {
    /// Sum over every token of the verbalizer.
    #[default]
    FullSequence,
    /// Only the first continuation token.
    FirstToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default)]
    pub auth_token_env_var: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub scoring: LabelScoring,
    #[serde(default = "default_backoff")]
    pub initial_backoff_ms: u64,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    250
}

impl BackendConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            auth_token_env_var: None,
            max_in_flight: default_in_flight(),
            scoring: LabelScoring::default(),
            initial_backoff_ms: default_backoff(),
        }
    }
}

/// Counting gate bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    cfg: BackendConfig,
    template: PromptTemplate,
    agent: ureq::Agent,
    gate: Gate,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig, template: PromptTemplate) -> Result<Self> {
        if !(cfg.timeout_secs > 0.0 && cfg.timeout_secs.is_finite()) {
            return Err(CalibError::Config("timeout_secs must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            template,
            agent,
            gate,
        })
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    /// Log-probability of `continuation` following `prompt`.
    pub fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<f64> {
        let body = json!({
            "model": self.cfg.model_name,
            "prompt": format!("{prompt}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let response = self.post_with_retry(&body.to_string())?;
        extract_continuation_logprob(&response, prompt.chars().count(), self.cfg.scoring)
    }

    fn post_with_retry(&self, body: &str) -> Result<Value> {
        let token = self
            .cfg
            .auth_token_env_var
            .as_deref()
            .and_then(|v| std::env::var(v).ok());
        let mut delay = Duration::from_millis(self.cfg.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            match self.post_once(body, token.as_deref()) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) => {
                    if attempt >= self.cfg.max_retries {
                        return Err(e);
                    }
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }

    fn post_once(&self, body: &str, token: Option<&str>) -> std::result::Result<Value, Attempt> {
        let _slot = self.gate.enter();
        let mut req = self
            .agent
            .post(&self.cfg.endpoint_url)
            .header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send(body)
            .map_err(|e| Attempt::Retryable(CalibError::Transport(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retryable(CalibError::Transport(e.to_string())))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| {
                Attempt::Fatal(CalibError::Protocol(format!("invalid JSON response: {e}")))
            }),
            429 | 500..=599 => Err(Attempt::Retryable(CalibError::Transport(format!(
                "HTTP {status}: {text}"
            )))),
            _ => Err(Attempt::Fatal(CalibError::Transport(format!(
                "HTTP {status}: {text}"
            )))),
        }
    }
}

enum Attempt {
    Retryable(CalibError),
    Fatal(CalibError),
}

/// Sums the echoed log-probabilities of tokens starting at or after
/// `prompt_chars`. Missing or null entries are protocol errors.
fn extract_continuation_logprob(
    response: &Value,
    prompt_chars: usize,
    scoring: LabelScoring,
) -> Result<f64> {
    let lp = response
        .pointer("/choices/0/logprobs")
        .ok_or_else(|| CalibError::Protocol("response lacks choices[0].logprobs".into()))?;
    let logprobs = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| CalibError::Protocol("missing token_logprobs".into()))?;
    let offsets = lp
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or_else(|| CalibError::Protocol("missing text_offset".into()))?;
    if offsets.len() != logprobs.len() {
        return Err(CalibError::Protocol(
            "token_logprobs and text_offset differ in length".into(),
        ));
    }
    let mut total = 0.0;
    let mut used = 0;
    for (off, lp) in offsets.iter().zip(logprobs) {
        let off = off
            .as_u64()
            .ok_or_else(|| CalibError::Protocol("non-integer text_offset".into()))?;
        if (off as usize) < prompt_chars {
            continue;
        }
        let v = lp
            .as_f64()
            .ok_or_else(|| CalibError::Protocol("null log-probability in continuation".into()))?;
        total += v;
        used += 1;
        if scoring == LabelScoring::FirstToken {
            break;
        }
    }
    if used == 0 {
        return Err(CalibError::Protocol("no continuation tokens scored".into()));
    }
    Ok(total)
}

impl Backend for HttpBackend {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist> {
        let prompt = self.template.render(context, query)?;
        let n = self.template.label_space.len();
        let mut scores = Vec::with_capacity(n);
        for c in 0..n {
            let cont = self.template.continuation(c).expect("class in range");
            scores.push(self.score_continuation(&prompt, &cont)?);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        ProbDist::from_weights(&weights)
    }

    fn max_concurrency(&self) -> usize {
        self.cfg.max_in_flight.max(1)
    }
}
