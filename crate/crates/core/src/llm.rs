//! Instrumented LLM abstraction with two backends: a deterministic scripted
//! mock used by every test, and an OpenAI-compatible chat-completion HTTP
//! backend for live use. All pipeline LLM traffic flows through
//! [`LlmClient`]; no other module talks to the network.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Heavier model for tool generation and per-request RCA.
    Reasoning,
    /// Lightweight model for report summarization.
    Fast,
}

#[derive(Debug, Clone)]
pub struct LlmRequest {
    pub role: Role,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_response_bytes: usize,
}

impl LlmRequest {
    pub fn new(role: Role, system: &str, user: &str) -> Self {
        LlmRequest {
            role,
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            max_response_bytes: 64 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmUsage {
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    pub calls: u64,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("llm transport error: {0}")]
    Transport(String),
    #[error("no scripted rule matched prompt starting {0:?}")]
    NoScriptMatch(String),
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError>;
    fn usage(&self) -> LlmUsage;
}

fn estimate_tokens(bytes: usize) -> u64 {
    (bytes as u64 + 3) / 4
}

#[derive(Default)]
struct UsageCounters {
    prompt_tokens: AtomicU64,
    response_tokens: AtomicU64,
    calls: AtomicU64,
}

impl UsageCounters {
    fn record(&self, prompt_bytes: usize, response_bytes: usize) {
        self.prompt_tokens
            .fetch_add(estimate_tokens(prompt_bytes), Ordering::Relaxed);
        self.response_tokens
            .fetch_add(estimate_tokens(response_bytes), Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self) -> LlmUsage {
        LlmUsage {
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            response_tokens: self.response_tokens.load(Ordering::Relaxed),
            calls: self.calls.load(Ordering::Relaxed),
        }
    }
}

fn default_role_filter() -> String {
    "any".into()
}

/// One scripted rule: first rule whose matcher hits the user prompt wins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRule {
    #[serde(rename = "match")]
    pub matcher: String,
    #[serde(default)]
    pub regex: bool,
    #[serde(default = "default_role_filter")]
    pub role: String,
    pub response: String,
}

pub struct ScriptedLlm {
    rules: Vec<(ScenarioRule, Option<regex::Regex>)>,
    counters: UsageCounters,
}

impl ScriptedLlm {
    pub fn new(rules: Vec<ScenarioRule>) -> Result<Self, LlmError> {
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            let re = if rule.regex {
                Some(
                    regex::Regex::new(&format!("^(?s:{})$", rule.matcher))
                        .map_err(|e| LlmError::Transport(format!("bad scenario regex: {e}")))?,
                )
            } else {
                None
            };
            compiled.push((rule, re));
        }
        Ok(ScriptedLlm {
            rules: compiled,
            counters: UsageCounters::default(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Transport(format!("read {}: {e}", path.display())))?;
        let rules: Vec<ScenarioRule> = serde_json::from_str(&text)
            .map_err(|e| LlmError::Transport(format!("parse {}: {e}", path.display())))?;
        Self::new(rules)
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let role_name = match req.role {
            Role::Reasoning => "reasoning",
            Role::Fast => "fast",
        };
        for (rule, re) in &self.rules {
            if rule.role != "any" && rule.role != role_name {
                continue;
            }
            let hit = match re {
                Some(re) => re.is_match(&req.user),
                None => req.user.contains(&rule.matcher),
            };
            if hit {
                self.counters
                    .record(req.system.len() + req.user.len(), rule.response.len());
                return Ok(rule.response.clone());
            }
        }
        let snippet: String = req.user.chars().take(120).collect();
        Err(LlmError::NoScriptMatch(snippet))
    }

    fn usage(&self) -> LlmUsage {
        self.counters.snapshot()
    }
}

/// Endpoint and model names for the HTTP backend, read from
/// `ALERTPILOT_LLM_URL`, `ALERTPILOT_LLM_MODEL_REASONING`,
/// `ALERTPILOT_LLM_MODEL_FAST`, and `ALERTPILOT_LLM_KEY`.
pub struct HttpLlm {
    url: String,
    model_reasoning: String,
    model_fast: String,
    key: String,
    client: reqwest::blocking::Client,
    counters: UsageCounters,
}

impl HttpLlm {
    pub fn from_env() -> Result<Self, LlmError> {
        let get = |name: &str| {
            std::env::var(name).map_err(|_| LlmError::Transport(format!("{name} is not set")))
        };
        Ok(HttpLlm {
            url: get("ALERTPILOT_LLM_URL")?,
            model_reasoning: get("ALERTPILOT_LLM_MODEL_REASONING")?,
            model_fast: get("ALERTPILOT_LLM_MODEL_FAST")?,
            key: get("ALERTPILOT_LLM_KEY")?,
            client: reqwest::blocking::Client::new(),
            counters: UsageCounters::default(),
        })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: ChatUsage,
}

impl LlmClient for HttpLlm {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let model = match req.role {
            Role::Reasoning => &self.model_reasoning,
            Role::Fast => &self.model_fast,
        };
        let body = ChatRequest {
            model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: &req.system,
                },
                ChatMessage {
                    role: "user",
                    content: &req.user,
                },
            ],
            temperature: req.temperature,
        };
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.key)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(LlmError::Transport(format!("HTTP {}", resp.status())));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| LlmError::Transport(format!("bad response body: {e}")))?;
        let content = parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| LlmError::Transport("empty choices".into()))?;
        self.counters.prompt_tokens.fetch_add(
            parsed.usage.prompt_tokens.max(estimate_tokens(req.user.len())),
            Ordering::Relaxed,
        );
        self.counters.response_tokens.fetch_add(
            parsed
                .usage
                .completion_tokens
                .max(estimate_tokens(content.len())),
            Ordering::Relaxed,
        );
        self.counters.calls.fetch_add(1, Ordering::Relaxed);
        let mut content = content;
        content.truncate(req.max_response_bytes);
        Ok(content)
    }

    fn usage(&self) -> LlmUsage {
        self.counters.snapshot()
    }
}

/// Display-only cost estimate from per-token prices (dollars per 1K tokens).
pub fn estimate_cost(usage: &LlmUsage, prompt_price_per_1k: f64, response_price_per_1k: f64) -> f64 {
    usage.prompt_tokens as f64 / 1000.0 * prompt_price_per_1k
        + usage.response_tokens as f64 / 1000.0 * response_price_per_1k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(matcher: &str, response: &str) -> ScenarioRule {
        ScenarioRule {
            matcher: matcher.into(),
            regex: false,
            role: "any".into(),
            response: response.into(),
        }
    }

    #[test]
    fn scripted_first_match_wins() {
        let llm = ScriptedLlm::new(vec![
            rule("gateway_id", "FROM A TO B WHERE gateway_id = \"gw-1\""),
            rule("gateway", "second"),
        ])
        .unwrap();
        let req = LlmRequest::new(Role::Reasoning, "", "alert mentions gateway_id=gw-1");
        assert_eq!(
            llm.complete(&req).unwrap(),
            "FROM A TO B WHERE gateway_id = \"gw-1\""
        );
    }

    #[test]
    fn scripted_no_match_is_an_error() {
        let llm = ScriptedLlm::new(vec![rule("gateway_id", "x")]).unwrap();
        let req = LlmRequest::new(Role::Reasoning, "", "something unrelated");
        assert!(matches!(llm.complete(&req), Err(LlmError::NoScriptMatch(_))));
    }

    #[test]
    fn scripted_is_deterministic_and_counts_calls() {
        let llm = ScriptedLlm::new(vec![rule("ping", "pong")]).unwrap();
        let req = LlmRequest::new(Role::Fast, "", "ping");
        let a = llm.complete(&req).unwrap();
        let b = llm.complete(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(llm.usage().calls, 2);
    }

    #[test]
    fn role_filter_applies() {
        let mut r = rule("x", "reasoning only");
        r.role = "reasoning".into();
        let llm = ScriptedLlm::new(vec![r]).unwrap();
        let fast = LlmRequest::new(Role::Fast, "", "x");
        assert!(llm.complete(&fast).is_err());
        let reasoning = LlmRequest::new(Role::Reasoning, "", "x");
        assert!(llm.complete(&reasoning).is_ok());
    }

    #[test]
    fn usage_starts_at_zero_and_estimates_tokens() {
        let llm = ScriptedLlm::new(vec![rule("a", "bbbb")]).unwrap();
        assert_eq!(llm.usage(), LlmUsage::default());
        let prompt: String = std::iter::repeat('a').take(400).collect();
        let req = LlmRequest::new(Role::Reasoning, "", &prompt);
        llm.complete(&req).unwrap();
        let usage = llm.usage();
        assert_eq!(usage.prompt_tokens, 100);
        assert_eq!(usage.response_tokens, 1);
        assert_eq!(usage.calls, 1);
    }

    #[test]
    fn usage_is_monotone() {
        let llm = ScriptedLlm::new(vec![rule("a", "b")]).unwrap();
        let req = LlmRequest::new(Role::Reasoning, "", "aaa");
        let mut last = llm.usage();
        for _ in 0..5 {
            llm.complete(&req).unwrap();
            let now = llm.usage();
            assert!(now.calls >= last.calls);
            assert!(now.prompt_tokens >= last.prompt_tokens);
            assert!(now.response_tokens >= last.response_tokens);
            last = now;
        }
    }

    #[test]
    fn scenario_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        std::fs::write(
            &path,
            r#"[{"match": "hello", "response": "world"},
                {"match": "h.*o", "regex": true, "role": "fast", "response": "re"}]"#,
        )
        .unwrap();
        let llm = ScriptedLlm::from_file(&path).unwrap();
        let req = LlmRequest::new(Role::Fast, "", "hello");
        assert_eq!(llm.complete(&req).unwrap(), "world");
    }
}
