//! Model-provider abstraction used by every model-backed backend.
//!
//! Core code only sees [`ModelProvider`]; the HTTP client lives in the
//! service crate. Model-backed backends ask for a single JSON object and parse
//! it with [`parse_json_object`].

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRequest {
    /// Short task tag, e.g. `"generate_response"`; useful in logs.
    pub task: String,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ProviderError> },
    #[error("malformed model output: {0}")]
    Malformed(String),
}

pub trait ModelProvider: Send + Sync {
    fn complete(&self, request: &ModelRequest) -> Result<String, ProviderError>;
}

/// Extracts the first JSON object from raw model text (tolerating code fences
/// or prose around it) and deserializes it.
pub fn parse_json_object<T: DeserializeOwned>(raw: &str) -> Result<T, ProviderError> {
    let start = raw.find('{').ok_or_else(|| ProviderError::Malformed("no JSON object in output".into()))?;
    let end = raw.rfind('}').ok_or_else(|| ProviderError::Malformed("unterminated JSON object".into()))?;
    if end < start {
        return Err(ProviderError::Malformed("unterminated JSON object".into()));
    }
    serde_json::from_str(&raw[start..=end]).map_err(|e| ProviderError::Malformed(e.to_string()))
}

/// Replays queued replies in order. Used in tests and demos of model-backed
/// backends without a network.
#[derive(Debug, Default)]
pub struct CannedProvider {
    replies: Mutex<VecDeque<Result<String, ProviderError>>>,
    seen: Mutex<Vec<ModelRequest>>,
}

impl CannedProvider {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CannedProvider {
            replies: Mutex::new(replies.into_iter().map(|s| Ok(s.into())).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn push_error(&self, err: ProviderError) {
        self.replies.lock().unwrap().push_back(Err(err));
    }

    pub fn requests(&self) -> Vec<ModelRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ModelProvider for CannedProvider {
    fn complete(&self, request: &ModelRequest) -> Result<String, ProviderError> {
        self.seen.lock().unwrap().push(request.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::Transport("no canned reply left".into())))
    }
}
