use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{cache_key, Backend, CompletionRecord, GatewayError, ModelSpec, RetryPolicy, TokenUsage};
use crate::promptgen::{estimate_tokens, RenderedPrompt};
use crate::sampler::EvalInstance;

/// OpenAI-compatible chat-completions client. The credential is read from the
/// spec's `api_key_env` at call time, so cache-only replays never need it.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    requests: AtomicUsize,
}

enum Attempt {
    Done(CompletionRecord),
    Retry(Option<u16>, String, Option<u64>),
    Fatal(GatewayError),
}

fn chat_url(endpoint: &str) -> String {
    let e = endpoint.trim_end_matches('/');
    if e.ends_with("/chat/completions") {
        e.to_string()
    } else {
        format!("{e}/chat/completions")
    }
}

impl HttpBackend {
    pub fn new(retry: RetryPolicy) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(retry.timeout_secs.max(1)))
            .build()
            .map_err(|e| GatewayError::Spec(e.to_string()))?;
        Ok(Self {
            client,
            retry,
            requests: AtomicUsize::new(0),
        })
    }

    fn attempt(&self, url: &str, key: &str, body: &Value, prompt: &RenderedPrompt, spec: &ModelSpec) -> Attempt {
        let started = Instant::now();
        self.requests.fetch_add(1, Ordering::SeqCst);
        let resp = match self.client.post(url).bearer_auth(key).json(body).send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(None, e.to_string(), None),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok());
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(Some(status), e.to_string(), None),
        };
        match status {
            200..=299 => {}
            401 | 403 => {
                return Attempt::Fatal(GatewayError::Credential(format!(
                    "{} rejected with status {status}",
                    spec.api_key_env
                )))
            }
            408 | 429 | 500..=599 => return Attempt::Retry(Some(status), text, retry_after),
            _ => return Attempt::Fatal(GatewayError::Rejected { status, body: text }),
        }
        let v: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(GatewayError::BadResponse(e.to_string())),
        };
        let Some(content) = v["choices"][0]["message"]["content"].as_str() else {
            return Attempt::Fatal(GatewayError::BadResponse("no choices[0].message.content".into()));
        };
        let usage = TokenUsage {
            input: v["usage"]["prompt_tokens"]
                .as_u64()
                .unwrap_or(prompt.token_estimate as u64),
            output: v["usage"]["completion_tokens"]
                .as_u64()
                .unwrap_or(estimate_tokens(content) as u64),
        };
        Attempt::Done(CompletionRecord {
            cache_key: cache_key(spec, &prompt.text),
            prompt_ref: prompt.instance_ref.clone(),
            raw_text: content.to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            token_usage: usage,
            attempt_count: 0,
        })
    }
}

impl Backend for HttpBackend {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _instance: &EvalInstance,
        spec: &ModelSpec,
    ) -> Result<CompletionRecord, GatewayError> {
        let key = std::env::var(&spec.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::Credential(format!("environment variable {} is not set", spec.api_key_env)))?;
        let endpoint = spec
            .endpoint
            .as_deref()
            .ok_or_else(|| GatewayError::Spec("http backend requires an endpoint".into()))?;
        let url = chat_url(endpoint);
        let body = json!({
            "model": spec.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": spec.temperature,
            "max_tokens": spec.max_output_tokens,
        });
        let max = self.retry.max_attempts.max(1);
        let mut last = (None, String::new());
        for attempt in 1..=max {
            match self.attempt(&url, &key, &body, prompt, spec) {
                Attempt::Done(mut rec) => {
                    rec.attempt_count = attempt;
                    return Ok(rec);
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(status, message, retry_after) => {
                    log::warn!("attempt {attempt}/{max} failed (status {status:?}): {message}");
                    last = (status, message);
                    if attempt < max {
                        let mut wait = self.retry.delay_ms(attempt);
                        if let Some(s) = retry_after {
                            wait = wait.max(s.saturating_mul(1000)).min(self.retry.max_delay_ms);
                        }
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
            }
        }
        Err(GatewayError::BackendUnavailable {
            attempts: max,
            last_status: last.0,
            message: last.1,
        })
    }

    fn networked(&self) -> bool {
        true
    }

    fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}
