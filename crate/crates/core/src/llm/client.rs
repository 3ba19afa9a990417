//! Blocking chat-completion client and the live model backend.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::prompt::{
    clean_domain_name, parse_index, parse_marked, render_prompt, ChatMessage, Marker, PromptKind, PromptParams,
};
use crate::oracle::{Answer, BackendError, ModelBackend, Question, QuestionStyle};
use crate::tree::{DomainId, KnowledgeTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Propose,
    Inquire,
    Answer,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleTopP {
    pub propose: f64,
    pub inquire: f64,
    pub answer: f64,
    pub judge: f64,
}

impl Default for RoleTopP {
    fn default() -> Self {
        Self { propose: 0.95, inquire: 0.95, answer: 0.8, judge: 0.95 }
    }
}

impl RoleTopP {
    pub fn get(&self, role: Role) -> f64 {
        match role {
            Role::Propose => self.propose,
            Role::Inquire => self.inquire,
            Role::Answer => self.answer,
            Role::Judge => self.judge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub top_p: RoleTopP,
    #[serde(default = "defaults::timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "defaults::max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "defaults::max_in_flight")]
    pub max_in_flight: usize,
}

mod defaults {
    pub fn temperature() -> f64 {
        0.7
    }
    pub fn timeout_secs() -> f64 {
        120.0
    }
    pub fn max_new_tokens() -> u32 {
        1024
    }
    pub fn max_in_flight() -> usize {
        4
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            temperature: defaults::temperature(),
            top_p: RoleTopP::default(),
            timeout_secs: defaults::timeout_secs(),
            max_new_tokens: defaults::max_new_tokens(),
            api_key_env: None,
            max_in_flight: defaults::max_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let who = &self.model_name;
        if self.base_url.is_empty() {
            return Err(format!("endpoint {who}: base_url is empty"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("endpoint {who}: temperature must be >= 0"));
        }
        for role in [Role::Propose, Role::Inquire, Role::Answer, Role::Judge] {
            let p = self.top_p.get(role);
            if !(p > 0.0 && p <= 1.0) {
                return Err(format!("endpoint {who}: top_p for {role:?} must lie in (0, 1], got {p}"));
            }
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("endpoint {who}: timeout_secs must be positive"));
        }
        if self.max_new_tokens == 0 || self.max_in_flight == 0 {
            return Err(format!("endpoint {who}: max_new_tokens and max_in_flight must be positive"));
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent requests to one endpoint.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Clone)]
pub struct ChatClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
    gate: Arc<Gate>,
}

enum Failure {
    Transient(BackendError),
    Fatal(BackendError),
}

impl ChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let gate = Arc::new(Gate { free: Mutex::new(config.max_in_flight), cv: Condvar::new() });
        Ok(Self { config, http, gate })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn request_body(&self, messages: &[ChatMessage], role: Role) -> serde_json::Value {
        json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "top_p": self.config.top_p.get(role),
            "max_tokens": self.config.max_new_tokens,
        })
    }

    /// One chat completion; a transient failure is retried once.
    pub fn chat(&self, messages: &[ChatMessage], role: Role) -> Result<String, BackendError> {
        let key = match &self.config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::AuthMissing(var.clone()))?),
            None => None,
        };
        let body = self.request_body(messages, role);
        let _permit = self.gate.acquire();
        match self.send(&body, key.as_deref()) {
            Ok(text) => Ok(text),
            Err(Failure::Fatal(e)) => Err(e),
            Err(Failure::Transient(e)) => {
                log::warn!("{}: retrying after {e}", self.config.model_name);
                self.send(&body, key.as_deref()).map_err(|f| match f {
                    Failure::Transient(e) | Failure::Fatal(e) => e,
                })
            }
        }
    }

    fn send(&self, body: &serde_json::Value, key: Option<&str>) -> Result<String, Failure> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.http.post(url).json(body);
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(BackendError::Timeout)
            } else {
                Failure::Transient(BackendError::Transport(e.to_string()))
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let err = BackendError::Transport(format!("HTTP {status}"));
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Failure::Transient(err)
            } else {
                Failure::Fatal(err)
            });
        }
        let v: serde_json::Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(BackendError::Timeout)
            } else {
                Failure::Fatal(BackendError::Parse(e.to_string()))
            }
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| Failure::Fatal(BackendError::Parse("response has no choices[0].message.content".into())))
    }
}

/// A model served over the chat-completion wire format.
pub struct LlmBackend {
    client: ChatClient,
}

impl LlmBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        Ok(Self { client: ChatClient::new(config)? })
    }

    fn ask(&self, kind: PromptKind, params: &PromptParams, role: Role) -> Result<String, BackendError> {
        let messages = render_prompt(kind, params).map_err(|e| BackendError::Parse(e.to_string()))?;
        self.client.chat(&messages, role)
    }
}

fn marked(text: &str, marker: Marker) -> Result<&str, BackendError> {
    parse_marked(text, marker).map_err(|e| BackendError::Parse(e.to_string()))
}

impl ModelBackend for LlmBackend {
    fn label(&self) -> String {
        self.client.config.model_name.clone()
    }

    fn propose_domain(
        &self,
        tree: &KnowledgeTree,
        parent: DomainId,
        _rng: &mut dyn RngCore,
    ) -> Result<Option<String>, BackendError> {
        let Some(p) = tree.get(parent) else { return Ok(None) };
        let Some(kind) = PromptKind::expand_for_level(p.level) else { return Ok(None) };
        let names = tree.path_of(parent).map(|path| tree.path_names(&path)).unwrap_or_default();
        let text = self.ask(kind, &PromptParams::for_path(&names), Role::Propose)?;
        Ok(parse_marked(&text, Marker::Proposition).ok().and_then(clean_domain_name))
    }

    fn generate_question(
        &self,
        names: &[String],
        _leaf: DomainId,
        style: QuestionStyle,
        _rng: &mut dyn RngCore,
    ) -> Result<String, BackendError> {
        let params = PromptParams { style: Some(style), ..PromptParams::for_path(names) };
        let text = self.ask(PromptKind::Inquiry, &params, Role::Inquire)?;
        let q = marked(&text, Marker::Question)?;
        if q.is_empty() {
            return Err(BackendError::Parse("empty question".into()));
        }
        Ok(q.to_string())
    }

    fn answer(&self, question: &Question, _rng: &mut dyn RngCore) -> Result<Answer, BackendError> {
        let text = self.client.chat(&[ChatMessage::user(question.text.clone())], Role::Answer)?;
        Ok(Answer { text, quality: None })
    }

    fn select_best(&self, question: &Question, answers: &[Answer], _rng: &mut dyn RngCore) -> Result<usize, BackendError> {
        let params = PromptParams {
            question: Some(question.text.clone()),
            answers: Some(answers.iter().map(|a| a.text.clone()).collect()),
            ..PromptParams::default()
        };
        let text = self.ask(PromptKind::Select, &params, Role::Judge)?;
        let raw = marked(&text, Marker::BestAnswer)?;
        parse_index(raw).ok_or_else(|| BackendError::Parse(format!("judge index {raw:?} is not a number")))
    }
}

/// The selection prompt asks for a single digit, so more than nine
/// candidates cannot be indexed as instructed.
pub fn judge_index_warning(sources: usize) -> Option<String> {
    (sources + 1 > 9).then(|| {
        format!("{} candidate answers per question exceed the single-digit judge index", sources + 1)
    })
}
