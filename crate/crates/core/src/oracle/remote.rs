//! OpenAI-compatible completions client that turns top-k token logprobs into
//! a classification loss.
//!
//! The prompt tokens, the input text and a task template question are sent
//! as one completion request asking for the top-k logprobs of the next
//! token. The logprobs of the class label tokens are renormalized over the
//! class set and the negative log-probability of the true class is the loss.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Batch, Example, LossOracle, OracleError};
use crate::gumbel::PromptSequence;

pub const API_KEY_ENV: &str = "REMOTE_API_KEY";
pub const API_URL_ENV: &str = "REMOTE_API_URL";

/// Number of alternatives the floor rule assumes were cut off.
const FLOOR_TOP_K: f64 = 20.0;

fn default_top_k() -> usize {
    20
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_in_flight() -> usize {
    1
}
fn default_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingLabelPolicy {
    /// Missing class tokens get the smallest returned logprob minus `ln 20`.
    #[default]
    Floor,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteExample {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Completions endpoint; falls back to `REMOTE_API_URL`.
    #[serde(default)]
    pub url: Option<String>,
    pub model: String,
    /// Text of every prompt vocabulary entry, indexed by token id.
    pub vocabulary: Vec<String>,
    /// Question appended after the input, e.g. `"equivalent? yes or no"`.
    pub template: String,
    /// Answer token of each class, indexed by label.
    pub label_tokens: Vec<String>,
    /// Inputs, indexed by `input_id`.
    #[serde(default)]
    pub examples: Vec<RemoteExample>,
    #[serde(default)]
    pub validation: Vec<RemoteExample>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub missing_label: MissingLabelPolicy,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl RemoteConfig {
    /// Text for `input_id`: training examples first, then validation ones.
    pub fn input_text(&self, input_id: u64) -> Option<&str> {
        let id = input_id as usize;
        if id < self.examples.len() {
            Some(&self.examples[id].text)
        } else {
            self.validation
                .get(id - self.examples.len())
                .map(|e| e.text.as_str())
        }
    }
}

/// Log-probabilities of every class token, renormalized over the class set.
///
/// `top` is the returned token → logprob map for the answer position.
/// Token text is compared after trimming surrounding whitespace; when several
/// returned tokens match a label the largest logprob wins.
pub fn class_log_probs_from_top(
    top: &[(String, f64)],
    label_tokens: &[String],
    policy: MissingLabelPolicy,
) -> Result<Vec<f64>, OracleError> {
    if top.is_empty() {
        return Err(OracleError::Protocol("empty top logprobs".into()));
    }
    let floor = top.iter().map(|(_, lp)| *lp).fold(f64::INFINITY, f64::min) - FLOOR_TOP_K.ln();
    let mut raw = Vec::with_capacity(label_tokens.len());
    for label in label_tokens {
        let want = label.trim();
        let found = top
            .iter()
            .filter(|(tok, _)| tok.trim() == want)
            .map(|(_, lp)| *lp)
            .fold(None, |acc: Option<f64>, lp| Some(acc.map_or(lp, |a| a.max(lp))));
        match (found, policy) {
            (Some(lp), _) => raw.push(lp),
            (None, MissingLabelPolicy::Floor) => raw.push(floor),
            (None, MissingLabelPolicy::Error) => return Err(OracleError::MissingLabel(label.clone())),
        }
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + raw.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(raw.into_iter().map(|v| v - lse).collect())
}

/// Negative renormalized log-probability of the true class.
pub fn logprob_loss(
    top: &[(String, f64)],
    label_tokens: &[String],
    true_class: usize,
    policy: MissingLabelPolicy,
) -> Result<f64, OracleError> {
    let lp = class_log_probs_from_top(top, label_tokens, policy)?;
    lp.get(true_class)
        .map(|v| -v)
        .ok_or_else(|| OracleError::InvalidBatch(format!("label {true_class} has no answer token")))
}

/// Extracts the top logprobs of the first generated position from an
/// OpenAI-style completions response.
pub fn parse_top_logprobs(body: &Value) -> Result<Vec<(String, f64)>, OracleError> {
    let first = body
        .pointer("/choices/0/logprobs/top_logprobs/0")
        .ok_or_else(|| OracleError::Protocol("response lacks choices[0].logprobs.top_logprobs[0]".into()))?;
    let map = first
        .as_object()
        .ok_or_else(|| OracleError::Protocol("top_logprobs entry is not an object".into()))?;
    map.iter()
        .map(|(tok, v)| {
            v.as_f64()
                .map(|lp| (tok.clone(), lp))
                .ok_or_else(|| OracleError::Protocol(format!("logprob for {tok:?} is not a number")))
        })
        .collect()
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GatePermit(self)
    }
}

struct GatePermit<'a>(&'a Gate);

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteLlmOracle {
    cfg: RemoteConfig,
    url: String,
    api_key: Option<String>,
    prompt_len: usize,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl std::fmt::Debug for RemoteLlmOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteLlmOracle")
            .field("url", &self.url)
            .field("model", &self.cfg.model)
            .finish()
    }
}

impl RemoteLlmOracle {
    pub fn new(cfg: RemoteConfig, prompt_len: usize) -> Result<Self, OracleError> {
        let url = match &cfg.url {
            Some(u) => u.clone(),
            None => std::env::var(API_URL_ENV).map_err(|_| {
                OracleError::Config(format!("no endpoint url in config and {API_URL_ENV} is unset"))
            })?,
        };
        if cfg.vocabulary.len() < 2 {
            return Err(OracleError::Config("remote vocabulary needs at least 2 entries".into()));
        }
        if cfg.label_tokens.len() < 2 {
            return Err(OracleError::Config("need an answer token for at least 2 classes".into()));
        }
        if cfg.max_attempts == 0 {
            return Err(OracleError::Config("max_attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| OracleError::Config(e.to_string()))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(RemoteLlmOracle {
            gate: Gate::new(cfg.max_in_flight),
            cfg,
            url,
            api_key,
            prompt_len,
            client,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    /// Prompt tokens, input and template question joined by single spaces.
    pub fn render(&self, prompt: &PromptSequence, input: &str) -> String {
        let mut parts: Vec<&str> = prompt
            .indices()
            .iter()
            .map(|&j| self.cfg.vocabulary[j].as_str())
            .collect();
        parts.push(input);
        parts.push(&self.cfg.template);
        parts.join(" ")
    }

    pub fn request_body(&self, text: &str) -> Value {
        json!({
            "model": self.cfg.model,
            "prompt": text,
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": self.cfg.top_k,
        })
    }

    fn top_logprobs(&self, text: &str) -> Result<Vec<(String, f64)>, OracleError> {
        let body = self.request_body(text);
        let _permit = self.gate.acquire();
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            if attempt > 1 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self.client.post(&self.url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let value: Value = resp
                            .json()
                            .map_err(|e| OracleError::Protocol(format!("malformed response body: {e}")))?;
                        return parse_top_logprobs(&value);
                    }
                    if status.is_server_error() || status.as_u16() == 429 {
                        last = format!("HTTP {status}");
                        continue;
                    }
                    return Err(OracleError::Protocol(format!("HTTP {status}")));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(OracleError::Transport {
            attempts: self.cfg.max_attempts,
            message: last,
        })
    }

    fn example_text(&self, ex: &Example) -> Result<&str, OracleError> {
        self.cfg
            .input_text(ex.input_id)
            .ok_or_else(|| OracleError::InvalidBatch(format!("no input text for id {}", ex.input_id)))
    }
}

impl LossOracle for RemoteLlmOracle {
    fn vocab_size(&self) -> usize {
        self.cfg.vocabulary.len()
    }

    fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    fn raw_loss(&self, prompt: &PromptSequence, batch: &Batch) -> Result<f64, OracleError> {
        let mut total = 0.0;
        for ex in batch.examples() {
            let text = self.render(prompt, self.example_text(ex)?);
            let top = self.top_logprobs(&text)?;
            total += logprob_loss(&top, &self.cfg.label_tokens, ex.label, self.cfg.missing_label)?;
        }
        Ok(total / batch.len() as f64)
    }

    fn class_log_probs(
        &self,
        prompt: &PromptSequence,
        example: &Example,
    ) -> Option<Result<Vec<f64>, OracleError>> {
        Some((|| {
            let text = self.render(prompt, self.example_text(example)?);
            let top = self.top_logprobs(&text)?;
            class_log_probs_from_top(&top, &self.cfg.label_tokens, self.cfg.missing_label)
        })())
    }
}

/// Convenience for building `top` lists in code and tests.
pub fn top_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Vec<(String, f64)> {
    let map: HashMap<String, f64> = pairs.into_iter().map(|(t, v)| (t.to_string(), v)).collect();
    let mut v: Vec<_> = map.into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}
