//! Vision-chat backends.
//!
//! Everything that talks to a model goes through [`ChatBackend`]: an
//! OpenAI-compatible HTTP client for real endpoints, a scripted mock replaying
//! canned replies keyed by sample id and turn index, and a deterministic
//! reasoning mock that synthesizes trajectory-construction replies from the
//! ground truth embedded in its prompts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Bbox;

/// Logical role of a transcript message. Tool results keep their own role in
/// stored transcripts; the HTTP transport folds them into user messages
/// because many chat endpoints reject images under a bare "tool" role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// One content item of a message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentItem {
    Text { text: String },
    Image { path: PathBuf },
}

impl ContentItem {
    pub fn text(text: impl Into<String>) -> Self {
        ContentItem::Text { text: text.into() }
    }

    pub fn image(path: impl Into<PathBuf>) -> Self {
        ContentItem::Image { path: path.into() }
    }
}

/// One transcript message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentItem>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentItem::text(text)],
        }
    }

    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|c| match c {
                ContentItem::Text { text } => Some(text.as_str()),
                ContentItem::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A completion request: the transcript so far plus bookkeeping the mocks use
/// for deterministic lookup.
#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub sample_id: &'a str,
    /// 0-based index of the assistant turn being requested.
    pub turn_index: usize,
    pub messages: &'a [ChatMessage],
    pub temperature: f64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint reply malformed: {0}")]
    MalformedReply(String),
    #[error("no scripted reply for sample \"{sample_id}\" turn {turn}")]
    NoScriptEntry { sample_id: String, turn: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    fn name(&self) -> &'static str;
}

/// Call a backend with retries and exponential backoff. Scripted-miss errors
/// are permanent and returned immediately.
pub fn complete_with_retries(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    attempts: u32,
    base_delay: Duration,
) -> Result<String, BackendError> {
    let mut delay = base_delay;
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match backend.complete(request) {
            Ok(reply) => return Ok(reply),
            Err(err @ BackendError::NoScriptEntry { .. }) => return Err(err),
            Err(err) => last = Some(err),
        }
        if attempt + 1 < attempts {
            std::thread::sleep(delay);
            delay *= 2;
        }
    }
    Err(last.expect("at least one attempt"))
}

// ── OpenAI-compatible HTTP backend ────────────────────────────────────────────

/// Client for OpenAI-compatible chat-completions endpoints. Images are sent
/// inline as base64 data URLs, the one transport vision endpoints universally
/// accept.
pub struct OpenAiCompatBackend {
    endpoint_url: String,
    model_name: String,
    auth_token: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiCompatBackend {
    /// `auth_env` names an environment variable holding the bearer token.
    pub fn new(
        endpoint_url: impl Into<String>,
        model_name: impl Into<String>,
        auth_env: Option<&str>,
        timeout: Duration,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            auth_token: auth_env.and_then(|name| std::env::var(name).ok()),
            agent: config.into(),
        }
    }

    fn encode_image(path: &Path) -> Result<serde_json::Value, BackendError> {
        let bytes = fs::read(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mime = match path.extension().and_then(|e| e.to_str()) {
            Some("jpg") | Some("jpeg") => "image/jpeg",
            _ => "image/png",
        };
        let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(serde_json::json!({
            "type": "image_url",
            "image_url": { "url": format!("data:{mime};base64,{encoded}") }
        }))
    }

    fn to_wire_messages(messages: &[ChatMessage]) -> Result<Vec<serde_json::Value>, BackendError> {
        let mut wire = Vec::with_capacity(messages.len());
        for message in messages {
            let (role, marker) = match message.role {
                Role::System => ("system", None),
                Role::User => ("user", None),
                Role::Assistant => ("assistant", None),
                Role::Tool => ("user", Some("[tool_result]")),
            };
            if message.role == Role::Assistant || message.role == Role::System {
                wire.push(serde_json::json!({
                    "role": role,
                    "content": message.joined_text(),
                }));
                continue;
            }
            let mut content = Vec::new();
            if let Some(marker) = marker {
                content.push(serde_json::json!({ "type": "text", "text": marker }));
            }
            for item in &message.content {
                match item {
                    ContentItem::Text { text } => {
                        content.push(serde_json::json!({ "type": "text", "text": text }));
                    }
                    ContentItem::Image { path } => content.push(Self::encode_image(path)?),
                }
            }
            wire.push(serde_json::json!({ "role": role, "content": content }));
        }
        Ok(wire)
    }

    fn extract_content(value: &serde_json::Value) -> Result<String, BackendError> {
        let content = value
            .pointer("/choices/0/message/content")
            .ok_or_else(|| BackendError::MalformedReply("missing choices[0].message.content".into()))?;
        match content {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Array(items) => Ok(items
                .iter()
                .filter_map(|i| i.get("text").and_then(|t| t.as_str()))
                .collect::<Vec<_>>()
                .join("")),
            other => Err(BackendError::MalformedReply(format!(
                "unexpected content shape: {other}"
            ))),
        }
    }
}

impl ChatBackend for OpenAiCompatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.model_name,
            "messages": Self::to_wire_messages(request.messages)?,
            "temperature": request.temperature,
        });
        let mut builder = self.agent.post(&self.endpoint_url);
        if let Some(token) = &self.auth_token {
            builder = builder.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = builder
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::MalformedReply(e.to_string()))?;
        Self::extract_content(&value)
    }

    fn name(&self) -> &'static str {
        "openai-compat"
    }
}

// ── scripted mock ─────────────────────────────────────────────────────────────

/// One canned assistant reply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub sample_id: String,
    pub turn: usize,
    pub reply: String,
}

/// Replays canned assistant replies keyed by `(sample_id, turn)`. The script
/// file is a JSON list of [`ScriptEntry`].
pub struct ScriptedMockBackend {
    replies: HashMap<(String, usize), String>,
}

impl ScriptedMockBackend {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        let replies = entries
            .into_iter()
            .map(|e| ((e.sample_id, e.turn), e.reply))
            .collect();
        Self { replies }
    }

    pub fn from_script_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedReply(format!("script {}: {e}", path.display())))?;
        Ok(Self::from_entries(entries))
    }
}

impl ChatBackend for ScriptedMockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.replies
            .get(&(request.sample_id.to_string(), request.turn_index))
            .cloned()
            .ok_or_else(|| BackendError::NoScriptEntry {
                sample_id: request.sample_id.to_string(),
                turn: request.turn_index,
            })
    }

    fn name(&self) -> &'static str {
        "scripted-mock"
    }
}

// ── deterministic reasoning mock ──────────────────────────────────────────────

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn field_after<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|line| line.strip_prefix(key))
        .map(str::trim)
}

/// Deterministic text endpoint for trajectory construction. It reads the
/// ground truth the prompts carry and answers consistently, so repeated runs
/// produce byte-identical trajectories without any network access.
pub struct DeterministicCotBackend;

impl DeterministicCotBackend {
    fn roi_reply(user_text: &str) -> String {
        let h = fnv1a(user_text);
        let x1 = 0.10 + (h % 20) as f64 / 100.0;
        let y1 = 0.10 + ((h >> 8) % 20) as f64 / 100.0;
        let bbox = Bbox::new(x1, y1, x1 + 0.40, y1 + 0.40);
        format!(
            "[{:.2}, {:.2}, {:.2}, {:.2}]",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )
    }

    fn verdict_reply(user_text: &str, class_name: &str) -> String {
        let abnormal = user_text.contains("Status: ABNORMAL");
        if abnormal {
            let anomaly = field_after(user_text, "- Specific anomaly type:")
                .unwrap_or("defect")
                .to_string();
            let answer = crate::protocol::FinalAnswer::anomalous(
                anomaly.clone(),
                vec![format!("visible {anomaly} inside the inspected region")],
            );
            format!(
                "<think>The crop of this {class_name} shows a clear {anomaly}: the local texture breaks the regular pattern seen elsewhere in the image.</think>\n{}",
                crate::protocol::render_answer(&answer)
            )
        } else {
            let answer = crate::protocol::FinalAnswer::normal();
            format!(
                "<think>The inspected region of this {class_name} matches the expected surface: uniform texture, no discoloration, no structural damage.</think>\n{}",
                crate::protocol::render_answer(&answer)
            )
        }
    }
}

impl ChatBackend for DeterministicCotBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let system_text = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(ChatMessage::joined_text)
            .unwrap_or_default();
        let user_text = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(ChatMessage::joined_text)
            .unwrap_or_default();
        let class_name = field_after(&user_text, "- Class:")
            .or_else(|| field_after(&user_text, "Class:"))
            .unwrap_or("object")
            .to_string();

        if user_text.contains("Output ONLY the bbox coordinates") {
            return Ok(Self::roi_reply(&user_text));
        }
        if system_text.contains("Output format:") {
            return Ok(Self::verdict_reply(&user_text, &class_name));
        }
        if system_text.contains("Do not output any final classification") {
            return Ok(format!(
                "Compared with the normal reference, the inspected region of this {class_name} is assessed side by side: matching areas confirm the expected pattern while any residual difference is weighed against natural variation before the verdict."
            ));
        }
        Ok(format!(
            "The overview of this {class_name} draws attention to one region whose appearance differs subtly from the surrounding surface, so it deserves a closer look."
        ))
    }

    fn name(&self) -> &'static str {
        "cot-mock"
    }
}

/// Build a backend from a CLI spec string: `mock` (deterministic reasoning
/// mock), `mock:<script.json>` (scripted replies), or an `http(s)://` URL.
pub fn backend_from_spec(
    spec: &str,
    model_name: &str,
    auth_env: Option<&str>,
    timeout: Duration,
) -> Result<Box<dyn ChatBackend>, BackendError> {
    if spec == "mock" {
        return Ok(Box::new(DeterministicCotBackend));
    }
    if let Some(script) = spec.strip_prefix("mock:") {
        return Ok(Box::new(ScriptedMockBackend::from_script_file(Path::new(
            script,
        ))?));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Box::new(OpenAiCompatBackend::new(
            spec, model_name, auth_env, timeout,
        )));
    }
    Err(BackendError::Transport(format!(
        "unrecognized backend spec \"{spec}\"; use mock, mock:<script.json>, or an http(s) URL"
    )))
}
