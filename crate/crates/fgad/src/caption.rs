//! Caption generation client.
//!
//! Produces caption documents either from in-tree fixtures (hermetic, zero
//! network I/O) or by calling an OpenAI-compatible chat-completion endpoint
//! with a system prompt that instructs the model to emit the JSON wire
//! format directly. Responses that fail schema validation are re-prompted
//! with the validation report appended to the conversation, up to the
//! configured retry budget. Validated documents are cached on disk keyed by
//! a content hash of the request, with create-then-rename writes so
//! concurrent writers never interleave.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mfsc::{self, MFSCDocument, ValidationReport};

/// Environment variable holding the API key for live mode.
pub const API_KEY_ENV: &str = "FGAD_API_KEY";

/// Identifier of the bundled system prompt template.
pub const SYSTEM_PROMPT_V1: &str = "mfsc-v1";

const SYSTEM_PROMPT_V1_TEXT: &str = include_str!("../assets/mfsc_system_prompt_v1.txt");

/// Connection settings for an OpenAI-compatible chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Read from `FGAD_API_KEY`; never stored in config files.
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: usize,
    pub temperature: f64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() {
            return Err(Error::Config("endpoint base_url must be nonempty".into()));
        }
        if self.max_retries > 10 {
            return Err(Error::Config(format!(
                "max_retries must be <= 10, got {}",
                self.max_retries
            )));
        }
        Ok(())
    }
}

/// What to caption: one image (live mode) or a registered fixture scene.
#[derive(Debug, Clone)]
pub enum CaptionPayload {
    Image { bytes: Vec<u8>, media_type: String },
    SceneRef(String),
}

#[derive(Debug, Clone)]
pub struct CaptionRequest {
    pub category: String,
    pub payload: CaptionPayload,
    pub system_prompt_template_id: String,
}

impl CaptionRequest {
    pub fn fixture(category: impl Into<String>) -> Self {
        let category = category.into();
        CaptionRequest {
            payload: CaptionPayload::SceneRef(category.clone()),
            category,
            system_prompt_template_id: SYSTEM_PROMPT_V1.into(),
        }
    }

    pub fn image(category: impl Into<String>, bytes: Vec<u8>, media_type: impl Into<String>) -> Self {
        CaptionRequest {
            category: category.into(),
            payload: CaptionPayload::Image {
                bytes,
                media_type: media_type.into(),
            },
            system_prompt_template_id: SYSTEM_PROMPT_V1.into(),
        }
    }

    fn cache_key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"fgad.caption.v1|");
        hasher.update(self.category.as_bytes());
        hasher.update(b"|");
        hasher.update(self.system_prompt_template_id.as_bytes());
        hasher.update(b"|");
        match &self.payload {
            CaptionPayload::Image { bytes, media_type } => {
                hasher.update(b"image|");
                hasher.update(media_type.as_bytes());
                hasher.update(b"|");
                hasher.update(Sha256::digest(bytes));
            }
            CaptionPayload::SceneRef(r) => {
                hasher.update(b"scene|");
                hasher.update(r.as_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Transport over which chat requests travel. Tests inject scripted or
/// failing transports; production uses [`HttpTransport`].
pub trait ChatTransport: Send + Sync {
    /// POST the chat-completion body, returning the raw response body.
    fn post_chat(&self, url: &str, api_key: Option<&str>, body: &serde_json::Value)
        -> Result<String>;
}

/// Blocking HTTP transport for `{base_url}/chat/completions`.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Endpoint {
                attempts: 0,
                message: format!("failed to build http client: {e}"),
            })?;
        Ok(HttpTransport { client })
    }
}

impl ChatTransport for HttpTransport {
    fn post_chat(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<String> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Endpoint {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Endpoint {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(Error::Endpoint {
                attempts: 1,
                message: format!("http {status}: {text}"),
            });
        }
        Ok(text)
    }
}

/// Registry of caption documents served in fixture mode.
#[derive(Default, Clone)]
pub struct FixtureStore {
    documents: BTreeMap<String, String>,
}

impl FixtureStore {
    /// The fixtures shipped in-tree.
    pub fn builtin() -> Self {
        let mut store = FixtureStore::default();
        store.register_text(include_str!("../fixtures/pcb_mfsc.json"));
        store.register_text(include_str!("../fixtures/ring_mfsc.json"));
        store
    }

    fn register_text(&mut self, text: &str) {
        let doc = mfsc::parse_document(text).expect("built-in fixture must be valid");
        self.documents.insert(doc.category.clone(), text.to_string());
    }

    pub fn register(&mut self, doc: &MFSCDocument) -> Result<()> {
        self.documents
            .insert(doc.category.clone(), mfsc::serialize(doc)?);
        Ok(())
    }

    /// Load every `*.json` caption document under a directory.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize> {
        let mut loaded = 0;
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let text = fs::read_to_string(&path)?;
            if let Ok(doc) = mfsc::parse_document(&text) {
                self.documents.insert(doc.category, text);
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn get(&self, category: &str) -> Option<&str> {
        self.documents.get(category).map(|s| s.as_str())
    }

    pub fn categories(&self) -> Vec<&str> {
        self.documents.keys().map(|s| s.as_str()).collect()
    }
}

/// Caption client. Fixture requests are served from the store without any
/// network I/O; image requests go through the transport with schema-checked
/// retries. Shareable across threads; every call is independent.
pub struct CaptionClient {
    config: EndpointConfig,
    transport: Box<dyn ChatTransport>,
    fixtures: FixtureStore,
    cache_dir: Option<PathBuf>,
}

impl CaptionClient {
    pub fn new(config: EndpointConfig, transport: Box<dyn ChatTransport>) -> Self {
        CaptionClient {
            config,
            transport,
            fixtures: FixtureStore::builtin(),
            cache_dir: None,
        }
    }

    pub fn with_fixtures(mut self, fixtures: FixtureStore) -> Self {
        self.fixtures = fixtures;
        self
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn system_prompt(template_id: &str) -> Result<&'static str> {
        match template_id {
            SYSTEM_PROMPT_V1 => Ok(SYSTEM_PROMPT_V1_TEXT),
            other => Err(Error::Config(format!(
                "unknown system prompt template `{other}`"
            ))),
        }
    }

    /// Validate a raw endpoint response without ever failing: syntax
    /// problems, schema problems and invariant violations all come back as
    /// report entries.
    pub fn check_schema(raw_response: &str) -> ValidationReport {
        mfsc::check_document(&extract_json(raw_response))
    }

    /// Generate (or fetch from cache / fixtures) the caption document for a
    /// request. The returned document always validates cleanly.
    pub fn generate_captions(&self, request: &CaptionRequest) -> Result<MFSCDocument> {
        if let CaptionPayload::SceneRef(reference) = &request.payload {
            let text = self
                .fixtures
                .get(reference)
                .ok_or_else(|| Error::MissingFixture(reference.clone()))?;
            let doc = mfsc::parse_document(text)?;
            self.persist(request, text, &doc)?;
            return Ok(doc);
        }

        if let Some(doc) = self.cached(request)? {
            return Ok(doc);
        }

        self.config.validate()?;
        let system = Self::system_prompt(&request.system_prompt_template_id)?;
        let mut messages = vec![
            json!({"role": "system", "content": system}),
            json!({"role": "user", "content": self.user_content(request)?}),
        ];

        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut last_report = ValidationReport::default();
        let attempts_budget = self.config.max_retries + 1;

        for attempt in 0..attempts_budget {
            let body = json!({
                "model": self.config.model_name,
                "temperature": self.config.temperature,
                "messages": messages,
            });
            let raw = self.post_with_retries(&url, &body)?;
            let content = extract_message_content(&raw).unwrap_or(raw.clone());
            let candidate = extract_json(&content);
            let report = mfsc::check_document(&candidate);
            if report.is_empty() {
                let doc = mfsc::parse_document(&candidate)?;
                self.persist_raw(request, &raw)?;
                let canonical = mfsc::serialize(&doc)?;
                self.persist(request, &canonical, &doc)?;
                return Ok(doc);
            }
            last_report = report;
            if attempt + 1 < attempts_budget {
                messages.push(json!({"role": "assistant", "content": content}));
                messages.push(json!({
                    "role": "user",
                    "content": format!(
                        "The document failed validation:\n{last_report}\nRe-emit the corrected JSON document only."
                    ),
                }));
            }
        }

        Err(Error::SchemaRetriesExhausted {
            attempts: attempts_budget,
            report: last_report,
        })
    }

    fn user_content(&self, request: &CaptionRequest) -> Result<serde_json::Value> {
        match &request.payload {
            CaptionPayload::Image { bytes, media_type } => {
                use base64::Engine as _;
                let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(json!([
                    {"type": "text", "text": format!(
                        "Category: {}. Produce the caption document for this normal image.",
                        request.category
                    )},
                    {"type": "image_url", "image_url": {"url": format!("data:{media_type};base64,{data}")}}
                ]))
            }
            CaptionPayload::SceneRef(_) => Err(Error::Config(
                "scene references are served from fixtures, not the endpoint".into(),
            )),
        }
    }

    fn post_with_retries(&self, url: &str, body: &serde_json::Value) -> Result<String> {
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match self
                .transport
                .post_chat(url, self.config.api_key.as_deref(), body)
            {
                Ok(raw) => return Ok(raw),
                Err(Error::Endpoint { message, .. }) => last = message,
                Err(other) => return Err(other),
            }
        }
        Err(Error::Endpoint {
            attempts,
            message: last,
        })
    }

    fn cache_path(&self, request: &CaptionRequest) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|dir| {
            dir.join("captions_cache")
                .join(&request.category)
                .join(format!("{}.json", request.cache_key()))
        })
    }

    fn cached(&self, request: &CaptionRequest) -> Result<Option<MFSCDocument>> {
        let Some(path) = self.cache_path(request) else {
            return Ok(None);
        };
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        Ok(Some(mfsc::parse_document(&text)?))
    }

    fn persist(&self, request: &CaptionRequest, canonical: &str, doc: &MFSCDocument) -> Result<()> {
        debug_assert!(mfsc::validate(doc).is_empty());
        let Some(path) = self.cache_path(request) else {
            return Ok(());
        };
        write_atomically(&path, canonical.as_bytes())
    }

    fn persist_raw(&self, request: &CaptionRequest, raw: &str) -> Result<()> {
        let Some(path) = self.cache_path(request) else {
            return Ok(());
        };
        write_atomically(&path.with_extension("raw.txt"), raw.as_bytes())
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("cache paths have parents");
    fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    fs::write(tmp.path(), bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Pull `choices[0].message.content` out of a chat-completion response;
/// `None` if the body is not that shape.
fn extract_message_content(raw: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(raw).ok()?;
    value
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(|s| s.to_string())
}

/// Strip markdown fences if the model wrapped its JSON in a code block.
fn extract_json(content: &str) -> String {
    let trimmed = content.trim();
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        let after = after.strip_prefix("json").unwrap_or(after);
        if let Some(end) = after.find("```") {
            return after[..end].trim().to_string();
        }
    }
    trimmed.to_string()
}
