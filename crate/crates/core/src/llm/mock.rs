use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, CompletionRequest, CompletionResponse, LlmError};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Hash,
    Regex,
    Default,
}

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub kind: RuleKind,
    #[serde(default)]
    pub pattern: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub logprobs: Vec<(String, f64)>,
    /// Fail this many calls per distinct prompt before answering.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_first: u32,
    /// Fail every call that reaches this rule.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fail_always: bool,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl MockRule {
    pub fn regex(pattern: &str, response_text: &str) -> Self {
        MockRule {
            kind: RuleKind::Regex,
            pattern: pattern.into(),
            response_text: response_text.into(),
            logprobs: Vec::new(),
            fail_first: 0,
            fail_always: false,
        }
    }

    pub fn hash(prompt_hash: &str, response_text: &str) -> Self {
        MockRule {
            kind: RuleKind::Hash,
            ..Self::regex(prompt_hash, response_text)
        }
    }

    pub fn default_response(response_text: &str) -> Self {
        MockRule {
            kind: RuleKind::Default,
            ..Self::regex("", response_text)
        }
    }

    pub fn with_logprobs(mut self, logprobs: &[(&str, f64)]) -> Self {
        self.logprobs = logprobs.iter().map(|(t, l)| (t.to_string(), *l)).collect();
        self
    }

    pub fn failing_first(mut self, n: u32) -> Self {
        self.fail_first = n;
        self
    }

    pub fn failing_always(mut self) -> Self {
        self.fail_always = true;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        MockScript { rules }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let rule: MockRule = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if rule.kind == RuleKind::Regex {
                Regex::new(&rule.pattern).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            }
            rules.push(rule);
        }
        Ok(MockScript { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_jsonl(&self) -> String {
        self.rules
            .iter()
            .map(|r| serde_json::to_string(r).expect("mock rules serialize") + "\n")
            .collect()
    }
}

/// Deterministic scripted backend.
///
/// Matching precedence: exact prompt-hash rules, then regex rules in script
/// order, then the first default rule.
pub struct MockBackend {
    id: String,
    hash_rules: HashMap<String, usize>,
    regex_rules: Vec<(Regex, usize)>,
    default_rule: Option<usize>,
    rules: Vec<MockRule>,
    failures: Mutex<HashMap<(usize, String), u32>>,
}

impl MockBackend {
    pub fn new(id: impl Into<String>, script: MockScript) -> Result<Self> {
        let mut hash_rules = HashMap::new();
        let mut regex_rules = Vec::new();
        let mut default_rule = None;
        for (i, rule) in script.rules.iter().enumerate() {
            match rule.kind {
                RuleKind::Hash => {
                    hash_rules.entry(rule.pattern.clone()).or_insert(i);
                }
                RuleKind::Regex => {
                    let re = Regex::new(&rule.pattern).map_err(|e| Error::Invalid(format!("rule {i}: {e}")))?;
                    regex_rules.push((re, i));
                }
                RuleKind::Default => {
                    default_rule.get_or_insert(i);
                }
            }
        }
        Ok(MockBackend {
            id: id.into(),
            hash_rules,
            regex_rules,
            default_rule,
            rules: script.rules,
            failures: Mutex::new(HashMap::new()),
        })
    }

    fn select(&self, request: &CompletionRequest) -> Option<usize> {
        self.hash_rules
            .get(&request.prompt.prompt_hash)
            .copied()
            .or_else(|| {
                self.regex_rules
                    .iter()
                    .find(|(re, _)| re.is_match(&request.prompt.text))
                    .map(|(_, i)| *i)
            })
            .or(self.default_rule)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, LlmError> {
        let idx = self.select(request).ok_or_else(|| LlmError::ScriptMiss {
            prompt_hash: request.prompt.prompt_hash.clone(),
        })?;
        let rule = &self.rules[idx];
        if rule.fail_always {
            return Err(LlmError::Transient(format!("scripted failure (rule {idx})")));
        }
        if rule.fail_first > 0 {
            let mut failures = self.failures.lock().unwrap_or_else(|p| p.into_inner());
            let seen = failures.entry((idx, request.prompt.prompt_hash.clone())).or_insert(0);
            if *seen < rule.fail_first {
                *seen += 1;
                return Err(LlmError::Transient(format!("scripted failure {} of {} (rule {idx})", *seen, rule.fail_first)));
            }
        }
        let mut logprobs = rule.logprobs.clone();
        logprobs.truncate(request.top_logprobs as usize);
        Ok(CompletionResponse {
            text: rule.response_text.clone(),
            answer_token_logprobs: logprobs,
            backend_id: self.id.clone(),
            cached: false,
            attempts: 1,
        })
    }
}
