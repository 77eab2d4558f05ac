//! A chat-completions client for driving a remote multimodal model. The
//! request body carries the prompt as a text part and, when an image
//! directory is configured, the reference image as a base64 data-URI part.
//! Replies are parsed from the first choice's message content. Transient
//! failures retry with exponential backoff.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Generator, GeneratorError, PromptRole};
use crate::corpus::ImageRecord;

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "CIR_MLLM_API_KEY";

const IMAGE_EXTENSIONS: &[(&str, &str)] = &[
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
    ("bmp", "image/bmp"),
];

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    /// directory mapping image ids to image files for attachment
    pub image_dir: Option<PathBuf>,
    pub temperature: f64,
    /// total attempts including the first
    pub attempts: u32,
    pub timeout: Duration,
    pub backoff_base: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            image_dir: None,
            temperature: 0.0,
            attempts: 3,
            timeout: Duration::from_secs(60),
            backoff_base: Duration::from_millis(500),
        }
    }
}

pub struct RemoteGenerator {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message>,
    temperature: f64,
}

#[derive(Serialize)]
struct Message {
    role: &'static str,
    content: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
}

impl RemoteGenerator {
    pub fn new(cfg: RemoteConfig) -> Result<Self, GeneratorError> {
        if cfg.attempts == 0 {
            return Err(GeneratorError::Other("attempts must be >= 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| GeneratorError::Transport(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    fn image_part(&self, image: &ImageRecord) -> Result<Option<serde_json::Value>, GeneratorError> {
        let Some(dir) = &self.cfg.image_dir else {
            return Ok(None);
        };
        for (ext, mime) in IMAGE_EXTENSIONS {
            let path = dir.join(format!("{}.{ext}", image.id));
            if path.is_file() {
                let bytes = std::fs::read(&path)
                    .map_err(|e| GeneratorError::Other(format!("reading {}: {e}", path.display())))?;
                let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                return Ok(Some(serde_json::json!({
                    "type": "image_url",
                    "image_url": { "url": format!("data:{mime};base64,{data}") }
                })));
            }
        }
        Err(GeneratorError::Other(format!(
            "no image file for id {:?} under {}",
            image.id,
            dir.display()
        )))
    }

    fn post_once(&self, body: &ChatRequest) -> Result<String, GeneratorError> {
        let mut req = self.client.post(&self.cfg.endpoint).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| GeneratorError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| GeneratorError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GeneratorError::Http {
                status: status.as_u16(),
                body: text.chars().take(200).collect(),
            });
        }
        let reply: ChatReply = serde_json::from_str(&text)
            .map_err(|e| GeneratorError::Decode(format!("{e}")))?;
        let content = reply
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| GeneratorError::Decode("reply has no choices[0].message.content".into()))?;
        Ok(content)
    }

    fn retryable(err: &GeneratorError) -> bool {
        match err {
            GeneratorError::Transport(_) => true,
            GeneratorError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

impl Generator for RemoteGenerator {
    fn generate(
        &self,
        image: &ImageRecord,
        _role: PromptRole,
        prompt_body: &str,
        _context: Option<&str>,
    ) -> Result<String, GeneratorError> {
        let mut content = Vec::new();
        if let Some(part) = self.image_part(image)? {
            content.push(part);
        }
        content.push(serde_json::json!({ "type": "text", "text": prompt_body }));
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![Message {
                role: "user",
                content,
            }],
            temperature: self.cfg.temperature,
        };

        let mut last = None;
        for attempt in 0..self.cfg.attempts {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.post_once(&body) {
                Ok(text) => return Ok(text),
                Err(e) if Self::retryable(&e) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt ran"))
    }
}
