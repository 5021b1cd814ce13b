use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResponse, LlmError};

/// Content-addressed response store: `<root>/<model>/<request hash>.json`.
///
/// Reads are lock-free; writes go through a temp file and rename under a
/// process-wide lock.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
    write_lock: Arc<Mutex<()>>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    request_digest: RequestDigest,
    response: CompletionResponse,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct RequestDigest {
    key: String,
    model_id: String,
    prompt_hash: String,
    temperature: f64,
    max_tokens: u32,
}

impl RequestDigest {
    fn of(request: &CompletionRequest) -> Self {
        RequestDigest {
            key: request.cache_key(),
            model_id: request.model_id.clone(),
            prompt_hash: request.prompt.prompt_hash.clone(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        }
    }
}

fn model_dir_name(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache {
            root: root.into(),
            write_lock: Arc::new(Mutex::new(())),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, request: &CompletionRequest) -> PathBuf {
        self.root
            .join(model_dir_name(&request.model_id))
            .join(format!("{}.json", request.cache_key()))
    }

    pub fn get(&self, request: &CompletionRequest) -> Result<Option<CompletionResponse>, LlmError> {
        let path = self.path_for(request);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(LlmError::Cache(format!("{}: {e}", path.display()))),
        };
        let record: CacheRecord =
            serde_json::from_str(&text).map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
        // a hash collision or a hand-edited file must not serve a wrong answer
        if record.request_digest != RequestDigest::of(request) {
            return Ok(None);
        }
        Ok(Some(record.response))
    }

    pub fn put(&self, request: &CompletionRequest, response: &CompletionResponse) -> Result<(), LlmError> {
        let record = CacheRecord {
            request_digest: RequestDigest::of(request),
            response: CompletionResponse {
                cached: false,
                attempts: 0,
                ..response.clone()
            },
        };
        let bytes = serde_json::to_vec_pretty(&record).map_err(|e| LlmError::Cache(e.to_string()))?;
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        crate::io::write_bytes(&self.path_for(request), &bytes).map_err(|e| LlmError::Cache(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptText;

    #[test]
    fn layout_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let req = CompletionRequest::new("gpt-4/0125", PromptText::new("v", "p".into()));
        assert!(cache.get(&req).unwrap().is_none());
        let resp = CompletionResponse {
            text: "Answer: No".into(),
            answer_token_logprobs: vec![("No".into(), -0.1)],
            backend_id: "b".into(),
            cached: false,
            attempts: 2,
        };
        cache.put(&req, &resp).unwrap();
        let path = dir.path().join("gpt-4_0125").join(format!("{}.json", req.cache_key()));
        assert!(path.exists());
        let got = cache.get(&req).unwrap().unwrap();
        assert_eq!(got.text, resp.text);
        assert_eq!(got.answer_token_logprobs, resp.answer_token_logprobs);

        let mut other = req.clone();
        other.temperature = 0.7;
        assert!(cache.get(&other).unwrap().is_none());
    }
}
