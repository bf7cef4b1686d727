//! HTTP clients for real models.
//!
//! Thinker, expert and scorer speak a chat-completions style protocol:
//! `{model, messages: [{role, content: [text and image parts]}]}` with images
//! inlined as base64 data URLs; the reply text is taken from the first choice.
//! Editors speak `{instruction, image}` -> `{image}` with base64 images.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::image::downscale_to_fit;
use super::{
    with_retry, BackendError, Editor, ImageRef, RetryPolicy, Scorer, ThinkRequest, Thinker, ThinkerMode,
    DEFAULT_MAX_PIXELS,
};
use crate::protocol::{parse_judge_scores, ScoreAggregate};

/// Connection settings shared by every remote role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub path: String,
    /// Model identifier sent with chat requests; unused by editors.
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub auth_header: String,
    /// Prefix placed before the key in the auth header.
    pub auth_scheme: String,
    pub timeout_secs: u64,
    pub max_pixels: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: String::new(),
            path: "/v1/chat/completions".into(),
            model: String::new(),
            api_key_env: None,
            auth_header: "Authorization".into(),
            auth_scheme: "Bearer".into(),
            timeout_secs: 120,
            max_pixels: DEFAULT_MAX_PIXELS,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

impl EndpointConfig {
    pub fn url(&self) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            self.path.trim_start_matches('/')
        )
    }

    /// Reads the API key from the environment. Fails naming the variable
    /// when it is configured but unset.
    pub fn resolve_auth(&self) -> Result<Option<(String, String)>, BackendError> {
        let Some(var) = &self.api_key_env else {
            return Ok(None);
        };
        let key =
            std::env::var(var).map_err(|_| BackendError::Config(format!("environment variable {var} is not set")))?;
        let value = if self.auth_scheme.is_empty() {
            key
        } else {
            format!("{} {}", self.auth_scheme, key)
        };
        Ok(Some((self.auth_header.clone(), value)))
    }
}

/// Counting semaphore bounding concurrent requests per backend.
#[derive(Debug)]
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct GatePermit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut active = self.active.lock().expect("gate poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("gate poisoned");
        }
        *active += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("gate poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Blocking JSON-over-HTTP transport with retries and an in-flight cap.
#[derive(Debug, Clone)]
struct HttpTransport {
    http: reqwest::blocking::Client,
    url: String,
    auth: Option<(String, String)>,
    retry: RetryPolicy,
    gate: Arc<InFlightGate>,
}

impl HttpTransport {
    fn new(cfg: &EndpointConfig) -> Result<Self, BackendError> {
        if cfg.base_url.is_empty() {
            return Err(BackendError::Config("base_url is empty".into()));
        }
        let auth = cfg.resolve_auth()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpTransport {
            http,
            url: cfg.url(),
            auth,
            retry: cfg.retry.clone(),
            gate: Arc::new(InFlightGate::new(cfg.max_in_flight)),
        })
    }

    fn post_once(&self, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.gate.acquire();
        let mut req = self.http.post(&self.url).json(body);
        if let Some((name, value)) = &self.auth {
            req = req.header(name.as_str(), value.as_str());
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(e.to_string())
            } else {
                BackendError::Unreachable(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Unreachable(e.to_string()))?;
        match status.as_u16() {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| BackendError::UnparseableResponse(format!("{e}: {}", snippet(&text)))),
            413 => Err(BackendError::PayloadTooLarge(snippet(&text))),
            408 | 429 | 500..=599 => Err(BackendError::Unreachable(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(BackendError::Rejected(format!("HTTP {status}: {}", snippet(&text)))),
        }
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        with_retry(&self.retry, |_| self.post_once(body))
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

/// Base64 payload of `image`, shrunk to the pixel budget. The source file is
/// only read.
fn encode_for_upload(image: &ImageRef, max_pixels: u64) -> Result<(String, String), BackendError> {
    if image.is_vector() {
        return Err(BackendError::Rejected(format!(
            "image `{}` is simulated and cannot be sent to a remote model",
            image.id
        )));
    }
    let bytes = image.bytes()?;
    let (bytes, _, _) = downscale_to_fit(&bytes, max_pixels)?;
    let media_type = image::guess_format(&bytes)
        .map(|f| f.to_mime_type().to_string())
        .unwrap_or_else(|_| "application/octet-stream".into());
    Ok((media_type, BASE64.encode(bytes)))
}

/// Chat-completions client used by the thinker, expert and scorer roles.
#[derive(Debug, Clone)]
pub struct ChatClient {
    transport: HttpTransport,
    model: String,
    max_pixels: u64,
}

impl ChatClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, BackendError> {
        Ok(ChatClient {
            transport: HttpTransport::new(cfg)?,
            model: cfg.model.clone(),
            max_pixels: cfg.max_pixels,
        })
    }

    pub fn request_body(&self, system: &str, user: &str, images: &[&ImageRef]) -> Result<Value, BackendError> {
        let mut content = vec![json!({"type": "text", "text": user})];
        for image in images {
            let (media_type, data) = encode_for_upload(image, self.max_pixels)?;
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{media_type};base64,{data}")}
            }));
        }
        Ok(json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": system}]},
                {"role": "user", "content": content}
            ]
        }))
    }

    pub fn complete(&self, system: &str, user: &str, images: &[&ImageRef]) -> Result<String, BackendError> {
        let body = self.request_body(system, user, images)?;
        let reply = self.transport.post(&body)?;
        first_choice_text(&reply)
    }
}

fn first_choice_text(reply: &Value) -> Result<String, BackendError> {
    let content = &reply["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(BackendError::UnparseableResponse(format!(
            "no message content in first choice: {}",
            snippet(&reply.to_string())
        ))),
    }
}

const VERDICT_SYSTEM_PROMPT: &str = "\
You review the result of an instruction-based image edit and plan the next attempt.
You receive two images in order: the original image, then the latest edited image.
Rate the edited image on two axes, each from 0 to 10:
- semantic: did the edit do what the original user instruction asked, while leaving everything else alone?
- quality: is the edited image free of artifacts, with plausible lighting, geometry and texture?
Then write the instruction the editor should receive next. If the edit is already good, repeat the previous instruction unchanged; otherwise rewrite it to fix the specific problems you found, being concrete about colors, positions, sizes and what must be preserved.
Reply in exactly this layout and nothing else:
<think>your analysis</think>
<score>{\"semantic\": S, \"quality\": Q}</score>
<answer>the next instruction</answer>";

const EXPERT_SYSTEM_PROMPT: &str = "\
You decide whether an instruction-based image edit is finished.
You receive two images in order: the original image, then the latest edited image.
Judge whether the edited image carries out the original user instruction with acceptable quality. Small flaws are fine when the intent is met; missing or wrong elements and heavy artifacts are not.
If it is not finished, write an improved instruction for the editor that addresses what went wrong, keeping what already worked.
Reply with one JSON object:
{\"is_satisfied\": true or false, \"reason\": \"why\", \"new_rewritten_prompt\": \"improved instruction\" or null when satisfied}";

const JUDGE_SYSTEM_PROMPT: &str = "\
You grade the result of an instruction-based image edit.
You receive two images in order: the original image, then the edited image.
Rate semantic adherence to the instruction (including preservation of untouched content) and perceptual quality, each from 0 to 10.
Reply with one JSON object: {\"semantic\": S, \"quality\": Q}";

fn turn_text(original: &str, previous: &str) -> String {
    format!("Original user instruction: \"{original}\"\nInstruction used for the edited image: \"{previous}\"")
}

/// Remote thinker in verdict or expert mode.
#[derive(Debug, Clone)]
pub struct RemoteThinker {
    name: String,
    client: ChatClient,
    mode: ThinkerMode,
}

impl RemoteThinker {
    pub fn new(name: impl Into<String>, cfg: &EndpointConfig, mode: ThinkerMode) -> Result<Self, BackendError> {
        Ok(RemoteThinker {
            name: name.into(),
            client: ChatClient::new(cfg)?,
            mode,
        })
    }
}

impl Thinker for RemoteThinker {
    fn name(&self) -> &str {
        &self.name
    }

    fn mode(&self) -> ThinkerMode {
        self.mode
    }

    fn think(&self, request: &ThinkRequest<'_>) -> Result<String, BackendError> {
        let system = match self.mode {
            ThinkerMode::Verdict => VERDICT_SYSTEM_PROMPT,
            ThinkerMode::Expert => EXPERT_SYSTEM_PROMPT,
        };
        self.client.complete(
            system,
            &turn_text(request.original_instruction, request.previous_instruction),
            &[request.source, request.previous_edit],
        )
    }
}

/// Remote judge; the scalar is the configured aggregate of the reply's
/// semantic and quality fields.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    name: String,
    client: ChatClient,
    aggregate: ScoreAggregate,
}

impl RemoteScorer {
    pub fn new(name: impl Into<String>, cfg: &EndpointConfig, aggregate: ScoreAggregate) -> Result<Self, BackendError> {
        Ok(RemoteScorer {
            name: name.into(),
            client: ChatClient::new(cfg)?,
            aggregate,
        })
    }
}

impl Scorer for RemoteScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, source: &ImageRef, edited: &ImageRef, original_instruction: &str) -> Result<f64, BackendError> {
        let text = self.client.complete(
            JUDGE_SYSTEM_PROMPT,
            &format!("User instruction: \"{original_instruction}\""),
            &[source, edited],
        )?;
        let (semantic, quality) = parse_judge_scores(&text).map_err(|v| {
            BackendError::UnparseableResponse(format!("judge reply ({}): {}", v.code(), snippet(&text)))
        })?;
        Ok(self.aggregate.apply(semantic, quality))
    }
}

/// Remote editor: `{instruction, image}` in, `{image}` out.
#[derive(Debug, Clone)]
pub struct RemoteEditor {
    name: String,
    transport: HttpTransport,
    max_pixels: u64,
}

impl RemoteEditor {
    pub fn new(name: impl Into<String>, cfg: &EndpointConfig) -> Result<Self, BackendError> {
        Ok(RemoteEditor {
            name: name.into(),
            transport: HttpTransport::new(cfg)?,
            max_pixels: cfg.max_pixels,
        })
    }
}

impl Editor for RemoteEditor {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_pixels(&self) -> u64 {
        self.max_pixels
    }

    fn edit(&self, source: &ImageRef, instruction: &str, seed: u64) -> Result<ImageRef, BackendError> {
        if instruction.trim().is_empty() {
            return Err(BackendError::Rejected("empty instruction".into()));
        }
        let (_, data) = encode_for_upload(source, self.max_pixels)?;
        let reply = self.transport.post(&json!({
            "instruction": instruction,
            "image": data,
            "seed": seed,
        }))?;
        let encoded = reply["image"]
            .as_str()
            .ok_or_else(|| BackendError::UnparseableResponse("editor reply has no `image` field".into()))?;
        let bytes = BASE64
            .decode(encoded)
            .map_err(|e| BackendError::UnparseableResponse(format!("editor image: {e}")))?;
        let mut image = ImageRef::from_bytes(String::new(), &bytes)?;
        image.id = format!("{}-{}", self.name, &image.content_hash[..16]);
        Ok(image)
    }
}
