//! Chat-completion router.
//!
//! Protocol: `POST {base_url}/chat/completions` with
//! `{model, messages: [{role, content}], temperature, max_tokens}`; the
//! reply text is `choices[0].message.content`.
//!
//! Reply parsing: every case-insensitive `model <digits>` mention is
//! collected. One distinct index in 0..=2 is a choice; no mention is
//! absent; anything else is ambiguous. An absent or ambiguous reply gets one
//! reprompt; a second failure, or exhausted transport retries, falls back to
//! the rule router.

use super::{build_prompt, route_rule, ModelCard, ModelIndex, PolicyKind, RouteDecision, REPLY_ONLY};
use crate::profiler::StructureProfile;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::{Arc, Condvar, LazyLock, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "AIDE_CHAT_API_KEY".into(),
            timeout_ms: 30_000,
            attempts: 3,
            backoff_ms: 250,
            temperature: 0.0,
            max_tokens: 16,
            max_in_flight: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

/// Sends one conversation and returns the assistant text, or a transport
/// error description.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, String>;
}

/// Blocking HTTP client for chat-completion endpoints.
pub struct HttpChat {
    cfg: ChatConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl HttpChat {
    pub fn new(cfg: ChatConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &ChatConfig {
        &self.cfg
    }
}

impl ChatTransport for HttpChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::to_string(&ChatRequest {
            model: &self.cfg.model,
            messages,
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_tokens,
        })
        .map_err(|e| e.to_string())?;
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(&body).map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| {
            format!(
                "malformed completion ({e}): {}",
                text.chars().take(200).collect::<String>()
            )
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "completion without choices".to_string())
    }
}

/// Caps concurrent requests through an inner transport.
pub struct BoundedChat {
    inner: Arc<dyn ChatTransport>,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl BoundedChat {
    pub fn new(inner: Arc<dyn ChatTransport>, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

impl ChatTransport for BoundedChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, String> {
        {
            let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
            }
            *n += 1;
        }
        let out = self.inner.complete(messages);
        *self.in_flight.lock().unwrap_or_else(|p| p.into_inner()) -= 1;
        self.freed.notify_one();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplyParse {
    Choice(ModelIndex),
    Ambiguous(Vec<usize>),
    Absent,
}

static MODEL_MENTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bmodel\s*([0-9]+)").expect("static pattern"));

pub fn parse_reply(reply: &str) -> ReplyParse {
    let found: BTreeSet<usize> = MODEL_MENTION
        .captures_iter(reply)
        .map(|c| c[1].parse::<usize>().unwrap_or(usize::MAX))
        .collect();
    match found.len() {
        0 => ReplyParse::Absent,
        1 => {
            let i = *found.first().expect("one element");
            match ModelIndex::new(i) {
                Ok(m) => ReplyParse::Choice(m),
                Err(_) => ReplyParse::Ambiguous(vec![i]),
            }
        }
        _ => ReplyParse::Ambiguous(found.into_iter().collect()),
    }
}

fn complete_with_retry(
    transport: &dyn ChatTransport,
    messages: &[ChatMessage],
    cfg: &ChatConfig,
) -> Result<String, String> {
    let mut last = String::new();
    for attempt in 0..cfg.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1)));
        }
        match transport.complete(messages) {
            Ok(r) => return Ok(r),
            Err(e) => {
                log::debug!("chat attempt {} failed: {e}", attempt + 1);
                last = e;
            }
        }
    }
    Err(last)
}

/// Routes through the chat model; always yields a valid decision.
pub fn route_llm(
    profile: &StructureProfile,
    cards: &[ModelCard],
    transport: &dyn ChatTransport,
    cfg: &ChatConfig,
) -> RouteDecision {
    let start = Instant::now();
    let prompt = build_prompt(profile, cards);
    let mut messages = vec![
        ChatMessage::new("system", prompt.system),
        ChatMessage::new("user", prompt.user),
    ];
    let mut transcript: Vec<String> = Vec::new();
    for round in 0..2 {
        let reply = match complete_with_retry(transport, &messages, cfg) {
            Ok(r) => r,
            Err(e) => {
                transcript.push(format!("transport error: {e}"));
                break;
            }
        };
        transcript.push(reply.clone());
        match parse_reply(&reply) {
            ReplyParse::Choice(m) => {
                return RouteDecision {
                    chosen: m,
                    policy: PolicyKind::Llm,
                    raw_response: transcript.join("\n---\n"),
                    fallback: false,
                    latency_ms: start.elapsed().as_secs_f64() * 1e3,
                };
            }
            outcome => {
                log::info!("chat reply {reply:?} for {} unusable: {outcome:?}", profile.slice_id);
                if round == 0 {
                    messages.push(ChatMessage::new("assistant", reply));
                    messages.push(ChatMessage::new("user", REPLY_ONLY));
                }
            }
        }
    }
    log::warn!("chat routing for {} fell back to the rule router", profile.slice_id);
    let rule = route_rule(profile, cards);
    RouteDecision {
        chosen: rule.chosen,
        policy: PolicyKind::Rule,
        raw_response: transcript.join("\n---\n"),
        fallback: true,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_table() {
        let m = |i| ReplyParse::Choice(ModelIndex::new(i).unwrap());
        assert_eq!(parse_reply("Model 2"), m(2));
        assert_eq!(parse_reply("I choose Model 1 because of the pelvis."), m(1));
        assert_eq!(parse_reply("model0"), m(0));
        assert_eq!(parse_reply("MODEL 2. Model 2 fits best."), m(2));
        assert_eq!(parse_reply("Model 1 or Model 2"), ReplyParse::Ambiguous(vec![1, 2]));
        assert_eq!(parse_reply("Model 7"), ReplyParse::Ambiguous(vec![7]));
        assert_eq!(parse_reply("The lung expert."), ReplyParse::Absent);
        assert_eq!(parse_reply(""), ReplyParse::Absent);
    }
}
