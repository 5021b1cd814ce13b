use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, CompletionRequest, CompletionResponse, LlmError};

pub const API_BASE_ENV: &str = "COAGENT_API_BASE";
pub const API_KEY_ENV: &str = "COAGENT_API_KEY";

/// OpenAI-style `/chat/completions` endpoint with token log-probabilities.
pub struct RemoteBackend {
    id: String,
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let base_url: String = base_url.into();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            id: format!("remote:{}", base_url.trim_end_matches('/')),
            base_url,
            api_key,
            agent,
        }
    }

    /// Reads the endpoint and credential from `COAGENT_API_BASE` / `COAGENT_API_KEY`.
    pub fn from_env(timeout: Duration) -> Result<Self, LlmError> {
        let base = std::env::var(API_BASE_ENV)
            .map_err(|_| LlmError::Protocol(format!("{API_BASE_ENV} is not set")))?;
        Ok(Self::new(base, std::env::var(API_KEY_ENV).ok(), timeout))
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn request_body(request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": request.top_logprobs > 0,
        });
        if request.top_logprobs > 0 {
            body["top_logprobs"] = json!(request.top_logprobs);
        }
        if let Some(seed) = request.seed_hint {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn is_answer_token(tok: &str) -> bool {
    matches!(tok.trim().to_ascii_lowercase().as_str(), "yes" | "no")
}

/// Pulls the message text and the top alternatives at the last Yes/No token.
pub(crate) fn parse_chat_response(payload: &Value, top_k: usize) -> Result<(String, Vec<(String, f64)>), LlmError> {
    let choice = payload
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::Protocol("choice has no message content".into()))?
        .to_string();

    let mut logprobs = Vec::new();
    if let Some(tokens) = choice.pointer("/logprobs/content").and_then(Value::as_array) {
        let answer = tokens
            .iter()
            .rev()
            .find(|t| t.get("token").and_then(Value::as_str).is_some_and(is_answer_token));
        if let Some(tok) = answer {
            let entry = |v: &Value| -> Result<(String, f64), LlmError> {
                let token = v.get("token").and_then(Value::as_str);
                let lp = v.get("logprob").and_then(Value::as_f64);
                match (token, lp) {
                    (Some(t), Some(l)) => Ok((t.to_string(), l)),
                    _ => Err(LlmError::Protocol("malformed logprob entry".into())),
                }
            };
            match tok.get("top_logprobs").and_then(Value::as_array) {
                Some(top) if !top.is_empty() => {
                    for v in top.iter().take(top_k) {
                        logprobs.push(entry(v)?);
                    }
                }
                _ => logprobs.push(entry(tok)?),
            }
        }
    }
    Ok((text, logprobs))
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(Self::request_body(request))
            .map_err(|e| LlmError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(LlmError::Transient(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(LlmError::Protocol(format!("HTTP {status}: {body}")));
        }
        let payload: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Protocol(format!("invalid JSON body: {e}")))?;
        let (text, answer_token_logprobs) = parse_chat_response(&payload, request.top_logprobs as usize)?;
        Ok(CompletionResponse {
            text,
            answer_token_logprobs,
            backend_id: self.id.clone(),
            cached: false,
            attempts: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptText;

    #[test]
    fn parses_answer_position() {
        let payload = json!({
            "choices": [{
                "message": {"content": "Because of X.\nAnswer: Yes"},
                "logprobs": {"content": [
                    {"token": "No", "logprob": -0.5, "top_logprobs": []},
                    {"token": "Answer", "logprob": -0.01, "top_logprobs": []},
                    {"token": " Yes", "logprob": -0.1, "top_logprobs": [
                        {"token": " Yes", "logprob": -0.1},
                        {"token": " No", "logprob": -2.4},
                        {"token": " yes", "logprob": -5.0}
                    ]}
                ]}
            }]
        });
        let (text, lps) = parse_chat_response(&payload, 2).unwrap();
        assert!(text.ends_with("Answer: Yes"));
        assert_eq!(lps, vec![(" Yes".to_string(), -0.1), (" No".to_string(), -2.4)]);
    }

    #[test]
    fn missing_choices_is_protocol_error() {
        assert!(matches!(parse_chat_response(&json!({}), 5), Err(LlmError::Protocol(_))));
    }

    #[test]
    fn body_shape() {
        let mut r = CompletionRequest::new("gpt", PromptText::new("v", "hi".into()));
        r.seed_hint = Some(3);
        let b = RemoteBackend::request_body(&r);
        assert_eq!(b["messages"][0]["content"], "hi");
        assert_eq!(b["top_logprobs"], 5);
        assert_eq!(b["seed"], 3);
        assert_eq!(b["temperature"], 0.0);
    }
}
