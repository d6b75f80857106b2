//! Blocking client for `/v1/completions`.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, Completion, Query};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "ICLCB_API_KEY";

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    cfg: BackendConfig,
    url: String,
    agent: ureq::Agent,
    api_key: Option<String>,
    slots: Slots,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let base = cfg.endpoint_url.clone().unwrap_or_default();
        let url = if base.trim_end_matches('/').ends_with("/v1/completions") {
            base
        } else {
            format!("{}/v1/completions", base.trim_end_matches('/'))
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(HttpBackend {
            slots: Slots {
                free: Mutex::new(cfg.max_in_flight),
                cv: Condvar::new(),
            },
            cfg,
            url,
            agent,
            api_key,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn post_once(&self, body: &Value) -> Result<Value, BackendError> {
        let _slot = self.slots.acquire();
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Endpoint { status, body: text });
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Err(e) if e.is_retryable() && attempt < self.cfg.retries => {
                    let wait = 100u64 << attempt.min(6);
                    log::warn!("request failed ({e}); retry {} in {wait} ms", attempt + 1);
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn model(&self) -> &str {
        self.cfg.model_name.as_deref().unwrap_or("default")
    }

    /// Greedy generation, or per-candidate echo scoring when `candidates`
    /// is given.
    pub fn http_complete(
        &self,
        prompt: &str,
        candidates: Option<&[String]>,
    ) -> Result<Completion, BackendError> {
        match candidates {
            None => {
                let body = json!({
                    "model": self.model(),
                    "prompt": prompt,
                    "max_tokens": self.cfg.max_tokens,
                    "temperature": 0,
                    "logprobs": self.cfg.logprobs,
                });
                let resp = self.post(&body)?;
                let text = resp
                    .pointer("/choices/0/text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| BackendError::Protocol("missing choices[0].text".into()))?;
                Ok(Completion {
                    text: text.to_string(),
                    option_scores: None,
                })
            }
            Some(cands) => {
                let mut scores = Vec::with_capacity(cands.len());
                for cand in cands {
                    scores.push(self.score_candidate(prompt, cand)?);
                }
                Ok(Completion {
                    text: String::new(),
                    option_scores: Some(scores),
                })
            }
        }
    }

    fn score_candidate(&self, prompt: &str, candidate: &str) -> Result<f64, BackendError> {
        let body = json!({
            "model": self.model(),
            "prompt": format!("{prompt}{candidate}"),
            "max_tokens": 0,
            "temperature": 0,
            "logprobs": self.cfg.logprobs,
            "echo": true,
        });
        let resp = self.post(&body)?;
        candidate_logprob(&resp, prompt.chars().count())
    }
}

/// Sums the echoed log-probabilities of tokens starting at or after
/// character offset `prompt_chars`.
pub(crate) fn candidate_logprob(resp: &Value, prompt_chars: usize) -> Result<f64, BackendError> {
    let lp = resp
        .pointer("/choices/0/logprobs")
        .ok_or_else(|| BackendError::Protocol("missing choices[0].logprobs".into()))?;
    let arr = |key: &str| {
        lp.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol(format!("missing logprobs.{key}")))
    };
    let values = arr("token_logprobs")?;
    let offsets = arr("text_offset")?;
    if values.len() != offsets.len() {
        return Err(BackendError::Protocol(
            "token_logprobs and text_offset differ in length".into(),
        ));
    }
    let mut total = 0.0;
    let mut seen = false;
    for (v, off) in values.iter().zip(offsets) {
        let off = off
            .as_u64()
            .ok_or_else(|| BackendError::Protocol("non-integer text_offset".into()))?;
        if (off as usize) < prompt_chars {
            continue;
        }
        let v = v
            .as_f64()
            .ok_or_else(|| BackendError::Protocol("null logprob inside candidate".into()))?;
        total += v;
        seen = true;
    }
    if !seen {
        return Err(BackendError::Protocol(
            "no echoed tokens cover the candidate".into(),
        ));
    }
    Ok(total)
}

impl Backend for HttpBackend {
    fn complete(&self, query: &Query<'_>) -> Result<Completion, BackendError> {
        self.http_complete(&query.prompt.text, query.candidates)
    }

    fn name(&self) -> String {
        format!("http:{}@{}", self.model(), self.url)
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight
    }
}
