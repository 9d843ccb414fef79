//! OpenAI-compatible chat-completions client.

use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use rehearsal_core::provider::{ModelProvider, ModelRequest, ProviderError};
use serde_json::json;

use crate::config::ProviderConfig;

pub const API_KEY_VAR: &str = "MODEL_API_KEY";

/// Counting semaphore for blocking callers.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpProvider {
    endpoint: String,
    model: String,
    timeout: Duration,
    max_retries: u32,
    api_key: Option<String>,
    permits: Permits,
    // Built on first use from a blocking thread; the blocking client must not
    // be constructed inside the async runtime.
    client: OnceLock<reqwest::blocking::Client>,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpProvider {
    pub fn from_config(cfg: &ProviderConfig) -> Self {
        let api_key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            tracing::warn!("{API_KEY_VAR} is not set; requests go out without authorization");
        }
        HttpProvider {
            endpoint: cfg.endpoint.clone().unwrap_or_default().trim_end_matches('/').to_string(),
            model: cfg.model_name.clone().unwrap_or_default(),
            timeout: Duration::from_millis(cfg.timeout_ms),
            max_retries: cfg.max_retries,
            api_key,
            permits: Permits { free: Mutex::new(cfg.max_concurrency.max(1)), cv: Condvar::new() },
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, ProviderError> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let c = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(self.client.get_or_init(|| c))
    }

    fn attempt(&self, request: &ModelRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let mut req = self.client()?.post(format!("{}/chat/completions", self.endpoint)).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Status { status: status.as_u16(), body: text.chars().take(500).collect() });
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| ProviderError::Malformed("response has no choices[0].message.content".into()))
    }
}

fn retryable(e: &ProviderError) -> bool {
    match e {
        ProviderError::Transport(_) | ProviderError::Timeout => true,
        ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ModelProvider for HttpProvider {
    fn complete(&self, request: &ModelRequest) -> Result<String, ProviderError> {
        let _permit = self.permits.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(e) if retryable(&e) && attempts <= self.max_retries => {
                    let backoff = Duration::from_millis(200 * (1 << (attempts - 1).min(6)));
                    tracing::warn!(task = %request.task, attempt = attempts, error = %e, "provider call failed, retrying");
                    std::thread::sleep(backoff);
                }
                Err(e) if attempts > 1 => {
                    return Err(ProviderError::RetriesExhausted { attempts, last: Box::new(e) });
                }
                Err(e) => return Err(e),
            }
        }
    }
}
