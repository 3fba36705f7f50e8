//! HTTP adapters for the live capabilities.
//!
//! Each adapter turns a provider-neutral request into the vendor's wire
//! format and parses the vendor's reply back into the neutral response body
//! that caches and fixture packs store.

use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::http::{HttpRequest, HttpResponse, HttpTransport, TransportFailure};
use super::{BlobStore, ProviderError, ProviderKind, SearchResult};

/// Endpoints, credentials and limits for live mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveSettings {
    pub llm_api_key: Option<String>,
    pub llm_base_url: String,
    pub llm_model: String,
    pub search_api_key: Option<String>,
    pub search_engine_id: Option<String>,
    pub search_url: String,
    pub vision_api_key: Option<String>,
    pub vision_url: String,
    pub embed_url: Option<String>,
    pub embed_model: String,
    pub embed_api_key: Option<String>,
    pub visual_embed_url: Option<String>,
    pub timeout: Duration,
    /// Total attempts per call, including the first.
    pub max_attempts: u32,
}

impl Default for LiveSettings {
    fn default() -> Self {
        Self {
            llm_api_key: None,
            llm_base_url: "https://api.openai.com/v1".into(),
            llm_model: "gpt-4o".into(),
            search_api_key: None,
            search_engine_id: None,
            search_url: "https://www.googleapis.com/customsearch/v1".into(),
            vision_api_key: None,
            vision_url: "https://vision.googleapis.com/v1/images:annotate".into(),
            embed_url: None,
            embed_model: "sentence-transformers/all-MiniLM-L6-v2".into(),
            embed_api_key: None,
            visual_embed_url: None,
            timeout: Duration::from_secs(30),
            max_attempts: 2,
        }
    }
}

impl LiveSettings {
    /// Reads `CRAVE_*` variables through `lookup`, keeping defaults for
    /// anything unset.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Self {
        let get = |name: &str| lookup(name).filter(|v| !v.trim().is_empty());
        let defaults = Self::default();
        Self {
            llm_api_key: get("CRAVE_LLM_API_KEY"),
            llm_base_url: get("CRAVE_LLM_BASE_URL").unwrap_or(defaults.llm_base_url),
            llm_model: get("CRAVE_LLM_MODEL").unwrap_or(defaults.llm_model),
            search_api_key: get("CRAVE_SEARCH_API_KEY"),
            search_engine_id: get("CRAVE_SEARCH_ENGINE_ID"),
            search_url: get("CRAVE_SEARCH_URL").unwrap_or(defaults.search_url),
            vision_api_key: get("CRAVE_VISION_API_KEY"),
            vision_url: get("CRAVE_VISION_URL").unwrap_or(defaults.vision_url),
            embed_url: get("CRAVE_EMBED_URL"),
            embed_model: get("CRAVE_EMBED_MODEL").unwrap_or(defaults.embed_model),
            embed_api_key: get("CRAVE_EMBED_API_KEY"),
            visual_embed_url: get("CRAVE_VISUAL_EMBED_URL"),
            ..defaults
        }
    }

    pub fn from_env() -> Self {
        Self::from_lookup(|name| std::env::var(name).ok())
    }

    /// Names of required variables that are unset.
    pub fn missing(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        if self.llm_api_key.is_none() {
            missing.push("CRAVE_LLM_API_KEY");
        }
        if self.search_api_key.is_none() {
            missing.push("CRAVE_SEARCH_API_KEY");
        }
        if self.search_engine_id.is_none() {
            missing.push("CRAVE_SEARCH_ENGINE_ID");
        }
        if self.vision_api_key.is_none() {
            missing.push("CRAVE_VISION_API_KEY");
        }
        if self.embed_url.is_none() {
            missing.push("CRAVE_EMBED_URL");
        }
        if self.visual_embed_url.is_none() {
            missing.push("CRAVE_VISUAL_EMBED_URL");
        }
        missing
    }
}

pub struct LiveBackend {
    settings: LiveSettings,
    transport: Arc<dyn HttpTransport>,
    blobs: Arc<BlobStore>,
}

impl LiveBackend {
    pub fn new(settings: LiveSettings, transport: Arc<dyn HttpTransport>, blobs: Arc<BlobStore>) -> Self {
        Self {
            settings,
            transport,
            blobs,
        }
    }

    fn send(&self, kind: ProviderKind, request: &HttpRequest) -> Result<Value, ProviderError> {
        let attempts = self.settings.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            let outcome = self
                .transport
                .send(request, self.settings.timeout)
                .map_err(|failure| match failure {
                    TransportFailure::Timeout => ProviderError::Timeout { kind },
                    TransportFailure::Connect(detail) | TransportFailure::Decode(detail) => {
                        ProviderError::Transport { kind, detail }
                    }
                })
                .and_then(|response| check_status(kind, response));
            match outcome {
                Ok(body) => return Ok(body),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::debug!("{kind} attempt {attempt} failed: {e}; retrying");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or(ProviderError::Timeout { kind }))
    }

    fn image_payload(&self, request: &Value) -> Result<ImagePayload, ProviderError> {
        if let Some(uri) = request.get("image_uri").and_then(Value::as_str) {
            return Ok(ImagePayload::Uri(uri.to_string()));
        }
        let sha = request
            .get("image_sha256")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::InvalidRequest("image request without image".into()))?;
        let bytes = self
            .blobs
            .get(sha)
            .ok_or_else(|| ProviderError::ImageUnresolvable(format!("sha256:{sha}")))?;
        Ok(ImagePayload::Base64(base64::engine::general_purpose::STANDARD.encode(bytes)))
    }

    fn llm(&self, request: &Value) -> Result<Value, ProviderError> {
        let kind = ProviderKind::Llm;
        let key = require(kind, &self.settings.llm_api_key, "CRAVE_LLM_API_KEY")?;
        let parsed: super::LlmRequest =
            serde_json::from_value(request.clone()).map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        let body = json!({
            "model": self.settings.llm_model,
            "temperature": 0,
            "response_format": { "type": "json_object" },
            "messages": [
                { "role": "system", "content": "You are a careful fact-checking assistant. Answer with JSON only." },
                { "role": "user", "content": parsed.render_prompt() },
            ],
        });
        let url = format!("{}/chat/completions", self.settings.llm_base_url.trim_end_matches('/'));
        let http = HttpRequest::post(url, body).header("Authorization", format!("Bearer {key}"));
        let content = parse_chat_completion(&self.send(kind, &http)?)?;
        Ok(json!({ "content": content }))
    }

    fn text_search(&self, request: &Value) -> Result<Value, ProviderError> {
        let kind = ProviderKind::TextSearch;
        let key = require(kind, &self.settings.search_api_key, "CRAVE_SEARCH_API_KEY")?;
        let cx = require(kind, &self.settings.search_engine_id, "CRAVE_SEARCH_ENGINE_ID")?;
        let query = request.get("query").and_then(Value::as_str).unwrap_or_default();
        // The search API serves at most 10 results per page.
        let limit = request.get("limit").and_then(Value::as_u64).unwrap_or(10).clamp(1, 10);
        let http = HttpRequest::get(&self.settings.search_url)
            .query("key", key)
            .query("cx", cx)
            .query("q", query)
            .query("num", limit.to_string());
        let results = parse_custom_search(&self.send(kind, &http)?)?;
        Ok(json!({ "results": results }))
    }

    fn reverse_image(&self, request: &Value) -> Result<Value, ProviderError> {
        let kind = ProviderKind::ReverseImage;
        let key = require(kind, &self.settings.vision_api_key, "CRAVE_VISION_API_KEY")?;
        let image = match self.image_payload(request)? {
            ImagePayload::Base64(content) => json!({ "content": content }),
            ImagePayload::Uri(uri) => json!({ "source": { "imageUri": uri } }),
        };
        let body = json!({
            "requests": [{
                "image": image,
                "features": [{ "type": "WEB_DETECTION", "maxResults": 20 }],
            }]
        });
        let http = HttpRequest::post(&self.settings.vision_url, body).query("key", key);
        let results = parse_web_detection(&self.send(kind, &http)?)?;
        Ok(json!({ "results": results }))
    }

    fn embed_text(&self, request: &Value) -> Result<Value, ProviderError> {
        let kind = ProviderKind::EmbedText;
        let url = require(kind, &self.settings.embed_url, "CRAVE_EMBED_URL")?;
        let text = request.get("text").and_then(Value::as_str).unwrap_or_default();
        let mut http = HttpRequest::post(url, json!({ "model": self.settings.embed_model, "input": [text] }));
        if let Some(key) = &self.settings.embed_api_key {
            http = http.header("Authorization", format!("Bearer {key}"));
        }
        let embedding = parse_embeddings(&self.send(kind, &http)?)?;
        Ok(json!({ "embedding": embedding }))
    }

    fn embed_image(&self, request: &Value) -> Result<Value, ProviderError> {
        let kind = ProviderKind::EmbedImage;
        let url = require(kind, &self.settings.visual_embed_url, "CRAVE_VISUAL_EMBED_URL")?;
        let body = match self.image_payload(request)? {
            ImagePayload::Base64(content) => json!({ "image": content }),
            ImagePayload::Uri(uri) => json!({ "image_uri": uri }),
        };
        let response = self.send(kind, &HttpRequest::post(url, body))?;
        let face = response.get("face").cloned().unwrap_or(Value::Null);
        let place = response.get("place").cloned();
        let sem = response.get("sem").cloned();
        match (place, sem) {
            (Some(place), Some(sem)) => Ok(json!({ "face": face, "place": place, "sem": sem })),
            _ => Err(ProviderError::DecodeFailure("visual embedding response lacks place/sem".into())),
        }
    }
}

impl super::Backend for LiveBackend {
    fn call(&self, kind: ProviderKind, request: &Value) -> Result<Value, ProviderError> {
        match kind {
            ProviderKind::Llm => self.llm(request),
            ProviderKind::TextSearch => self.text_search(request),
            ProviderKind::ReverseImage => self.reverse_image(request),
            ProviderKind::EmbedText => self.embed_text(request),
            ProviderKind::EmbedImage => self.embed_image(request),
        }
    }
}

enum ImagePayload {
    Base64(String),
    Uri(String),
}

fn require<'a>(kind: ProviderKind, value: &'a Option<String>, var: &str) -> Result<&'a str, ProviderError> {
    value.as_deref().ok_or_else(|| ProviderError::Unconfigured {
        kind,
        detail: format!("{var} is not set"),
    })
}

fn check_status(kind: ProviderKind, response: HttpResponse) -> Result<Value, ProviderError> {
    match response.status {
        200..=299 => Ok(response.body),
        429 => Err(ProviderError::QuotaExhausted { kind }),
        403 if response.body.to_string().to_lowercase().contains("quota") => {
            Err(ProviderError::QuotaExhausted { kind })
        }
        status => Err(ProviderError::Http { kind, status }),
    }
}

fn malformed(kind: ProviderKind, detail: impl Into<String>) -> ProviderError {
    ProviderError::MalformedResponse {
        kind,
        detail: detail.into(),
    }
}

/// Extracts the assistant message from an OpenAI-style chat completion.
pub(crate) fn parse_chat_completion(body: &Value) -> Result<String, ProviderError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| malformed(ProviderKind::Llm, "no choices[0].message.content"))
}

/// Parses a programmable-search response into neutral results.
pub(crate) fn parse_custom_search(body: &Value) -> Result<Vec<SearchResult>, ProviderError> {
    if !body.is_object() {
        return Err(malformed(ProviderKind::TextSearch, "response is not an object"));
    }
    let Some(items) = body.get("items").and_then(Value::as_array) else {
        // No `items` key means zero hits.
        return Ok(Vec::new());
    };
    Ok(items
        .iter()
        .filter_map(|item| {
            let url = item.get("link").and_then(Value::as_str)?.to_string();
            let image_ref = item
                .pointer("/pagemap/cse_image/0/src")
                .and_then(Value::as_str)
                .map(str::to_owned);
            Some(SearchResult {
                title: str_field(item, "title"),
                snippet: str_field(item, "snippet").replace('\n', " "),
                page_text: None,
                url,
                image_ref,
            })
        })
        .collect())
}

/// Parses a web-detection annotation into neutral results, one per page
/// carrying the matched image.
pub(crate) fn parse_web_detection(body: &Value) -> Result<Vec<SearchResult>, ProviderError> {
    let response = body
        .pointer("/responses/0")
        .ok_or_else(|| malformed(ProviderKind::ReverseImage, "no responses[0]"))?;
    if let Some(error) = response.get("error") {
        return Err(malformed(ProviderKind::ReverseImage, error.to_string()));
    }
    let Some(pages) = response
        .pointer("/webDetection/pagesWithMatchingImages")
        .and_then(Value::as_array)
    else {
        return Ok(Vec::new());
    };
    Ok(pages
        .iter()
        .filter_map(|page| {
            let url = page.get("url").and_then(Value::as_str)?.to_string();
            let image_ref = ["fullMatchingImages", "partialMatchingImages"]
                .iter()
                .find_map(|field| page.pointer(&format!("/{field}/0/url")).and_then(Value::as_str))
                .map(str::to_owned);
            Some(SearchResult {
                title: strip_tags(&str_field(page, "pageTitle")),
                snippet: String::new(),
                page_text: None,
                url,
                image_ref,
            })
        })
        .collect())
}

/// Parses an OpenAI-style embeddings response.
pub(crate) fn parse_embeddings(body: &Value) -> Result<Vec<f64>, ProviderError> {
    let vector = body
        .pointer("/data/0/embedding")
        .ok_or_else(|| malformed(ProviderKind::EmbedText, "no data[0].embedding"))?;
    serde_json::from_value(vector.clone()).map_err(|e| malformed(ProviderKind::EmbedText, e.to_string()))
}

fn str_field(value: &Value, field: &str) -> String {
    value.get(field).and_then(Value::as_str).unwrap_or_default().to_string()
}

fn strip_tags(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let mut in_tag = false;
    for c in html.chars() {
        match c {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            _ if !in_tag => out.push(c),
            _ => {}
        }
    }
    out.replace("&amp;", "&").replace("&quot;", "\"").replace("&#39;", "'")
}
