//! Zero-shot captioning of RGBA composites and text embedding of captions.
//!
//! Captioning and embedding go through the [`CaptionProvider`] and
//! [`EmbeddingProvider`] traits. HTTP adapters cover hosted backends; the
//! offline implementations ([`CannedCaptioner`], [`ImageStatsCaptioner`],
//! [`HashingEmbedder`]) are deterministic and used by tests and demos.
//! Both stages cache results as content-addressed JSON files.

use crate::hashing::{fnv1a64, sha256_hex, sha256_parts};
use crate::imagery::{RasterImage, RetryPolicy, TransportError};
use base64::Engine;
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

pub const PROMPT_VERSION: &str = "v1";
pub const DEFAULT_ROLE: &str = "municipal heat planner";
pub const FACTOR_COUNT: usize = 5;
pub const EMBEDDING_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("provider transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unparseable caption ({reason}); raw response: {raw}")]
    Parse { reason: String, raw: String },
    #[error("provider contract violation: {0}")]
    Contract(String),
    #[error("cache error at {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, SemanticsError>;

const PROMPT_TEMPLATE_V1: &str = "\
You are a {role}. The satellite image shows an urban area; the region of \
interest is the part of the image that is not transparent (its alpha channel \
marks the isoline boundary). Ignore everything outside that region.

List the five most salient visual factors inside the region that affect its \
annual space-heating demand, for example building density, roof type and \
condition, vegetation cover, solar panels or surface sealing. For each factor \
give a short name, a one-sentence description of what you see, and your \
confidence as a number between 0 and 1.

Respond with JSON only, exactly in this form and with exactly five entries:
{\"factors\": [{\"name\": \"...\", \"description\": \"...\", \"confidence\": 0.0}]}";

/// Versioned captioning prompt with an overridable planner role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub role: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: PROMPT_VERSION.to_owned(),
            role: DEFAULT_ROLE.to_owned(),
        }
    }
}

impl PromptTemplate {
    pub fn with_role(role: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            ..Self::default()
        }
    }

    pub fn render(&self) -> String {
        PROMPT_TEMPLATE_V1.replace("{role}", &self.role)
    }

    /// Hash over version and rendered text; part of every caption cache key.
    pub fn hash(&self) -> String {
        sha256_parts(&[self.version.as_bytes(), self.render().as_bytes()])
    }
}

/// Default prompt text.
pub fn build_prompt() -> String {
    PromptTemplate::default().render()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub description: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCaption {
    pub factors: Vec<Factor>,
    pub raw_response: String,
    pub provider_id: String,
}

/// Removes a surrounding Markdown code fence, if any.
fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses the provider response into exactly five factors. Confidences
/// outside [0, 1] are clamped with a warning.
pub fn parse_caption(raw: &str, provider_id: &str) -> Result<SemanticCaption> {
    let fail = |reason: String| SemanticsError::Parse {
        reason,
        raw: raw.to_owned(),
    };
    let value: Value = serde_json::from_str(raw.trim())
        .or_else(|_| serde_json::from_str(strip_code_fence(raw)))
        .map_err(|e| fail(format!("not JSON: {e}")))?;
    let items = value
        .get("factors")
        .and_then(Value::as_array)
        .ok_or_else(|| fail("missing factors array".into()))?;
    if items.len() != FACTOR_COUNT {
        return Err(fail(format!(
            "expected {FACTOR_COUNT} factors, got {}",
            items.len()
        )));
    }
    let factors = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let text = |key: &str| {
                item.get(key)
                    .and_then(Value::as_str)
                    .map(|s| s.trim().to_owned())
                    .ok_or_else(|| fail(format!("factor {i} lacks string field {key}")))
            };
            let name = text("name")?;
            if name.is_empty() {
                return Err(fail(format!("factor {i} has an empty name")));
            }
            let description = text("description")?;
            let confidence = item
                .get("confidence")
                .and_then(Value::as_f64)
                .filter(|c| c.is_finite())
                .ok_or_else(|| fail(format!("factor {i} lacks a numeric confidence")))?;
            let clamped = confidence.clamp(0.0, 1.0);
            if clamped != confidence {
                warn!("factor {name:?}: confidence {confidence} clamped to {clamped}");
            }
            Ok(Factor {
                name,
                description,
                confidence: clamped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticCaption {
        factors,
        raw_response: raw.to_owned(),
        provider_id: provider_id.to_owned(),
    })
}

/// Deterministic text form: factors by descending confidence, then name;
/// one `name (confidence): description` line each.
pub fn canonicalize_caption(caption: &SemanticCaption) -> String {
    let mut factors: Vec<&Factor> = caption.factors.iter().collect();
    factors.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.name.cmp(&b.name))
    });
    factors
        .iter()
        .map(|f| format!("{} ({:.2}): {}", f.name, f.confidence, f.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Vision-language backend: prompt plus PNG payload in, raw text out.
pub trait CaptionProvider: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, image_png: &[u8])
        -> std::result::Result<String, TransportError>;
}

/// Text-embedding backend.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, TransportError>;
}

fn cache_read<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("ignoring corrupt cache entry {}: {e}", path.display());
            None
        }
    }
}

fn cache_write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable cache entry");
    crate::io::write_atomic(path, text.as_bytes()).map_err(|e| SemanticsError::Cache {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Hash of an image's dimensions and pixel bytes.
pub fn image_hash(img: &RasterImage) -> String {
    let dims = format!("{}x{}x{}", img.width, img.height, img.channels);
    sha256_parts(&[dims.as_bytes(), &img.data])
}

pub fn caption_cache_path(cache_dir: &Path, image_hash: &str, prompt_hash: &str, provider_id: &str) -> PathBuf {
    let key = sha256_parts(&[image_hash.as_bytes(), prompt_hash.as_bytes(), provider_id.as_bytes()]);
    cache_dir.join("captions").join(format!("{key}.json"))
}

/// Captions a 512×512 RGBA composite, consulting and filling the cache.
/// Unparseable responses are never cached.
pub fn caption_region(
    composite: &RasterImage,
    prompt: &PromptTemplate,
    provider: &dyn CaptionProvider,
    cache_dir: Option<&Path>,
    retry: &RetryPolicy,
) -> Result<SemanticCaption> {
    if composite.channels != 4 || composite.width != 512 || composite.height != 512 {
        return Err(SemanticsError::Precondition(format!(
            "composite must be 512x512x4, got {}x{}x{}",
            composite.width, composite.height, composite.channels
        )));
    }
    let provider_id = provider.id();
    let cache_path = cache_dir.map(|d| {
        caption_cache_path(d, &image_hash(composite), &prompt.hash(), &provider_id)
    });
    if let Some(hit) = cache_path.as_deref().and_then(cache_read::<SemanticCaption>) {
        return Ok(hit);
    }
    let png = composite
        .encode_png()
        .map_err(|e| SemanticsError::Precondition(e.to_string()))?;
    let text = prompt.render();
    let (raw, _) = retry
        .run(|| provider.complete(&text, &png))
        .map_err(|(message, attempts)| SemanticsError::Transport { attempts, message })?;
    let caption = parse_caption(&raw, &provider_id)?;
    if let Some(path) = cache_path {
        cache_write(&path, &caption)?;
    }
    Ok(caption)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub values: Vec<f64>,
    pub provider_id: String,
    pub source_caption_hash: String,
}

impl SemanticEmbedding {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != EMBEDDING_DIM {
            return Err(SemanticsError::Contract(format!(
                "embedding has {} dimensions, expected {EMBEDDING_DIM}",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(SemanticsError::Contract(format!("embedding component {i} is not finite")));
        }
        Ok(())
    }
}

/// Embeds `text`, consulting the cache keyed by (text hash, provider id).
pub fn embed_text(
    text: &str,
    provider: &dyn EmbeddingProvider,
    cache_dir: Option<&Path>,
    retry: &RetryPolicy,
) -> Result<SemanticEmbedding> {
    if text.trim().is_empty() {
        return Err(SemanticsError::Precondition("cannot embed empty text".into()));
    }
    let provider_id = provider.id();
    let text_hash = sha256_hex(text.as_bytes());
    let cache_path = cache_dir.map(|d| {
        let key = sha256_parts(&[text_hash.as_bytes(), provider_id.as_bytes()]);
        d.join("embeddings").join(format!("{key}.json"))
    });
    if let Some(hit) = cache_path.as_deref().and_then(cache_read::<SemanticEmbedding>) {
        if hit.validate().is_ok() {
            return Ok(hit);
        }
    }
    let (values, _) = retry
        .run(|| provider.embed(text))
        .map_err(|(message, attempts)| SemanticsError::Transport { attempts, message })?;
    let emb = SemanticEmbedding {
        values,
        provider_id,
        source_caption_hash: text_hash,
    };
    emb.validate()?;
    if let Some(path) = cache_path {
        cache_write(&path, &emb)?;
    }
    Ok(emb)
}

/// Lowercased word tokens with surrounding punctuation trimmed.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
}

const BUCKET_SEED: u64 = 0x5eed_0001;
const SIGN_SEED: u64 = 0x5eed_0002;

/// Signed feature hashing of word tokens into 512 buckets, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

impl HashingEmbedder {
    pub fn vectorize(text: &str) -> std::result::Result<Vec<f64>, String> {
        let mut v = vec![0.0; EMBEDDING_DIM];
        let mut any = false;
        for token in word_tokens(text) {
            any = true;
            let bucket = (fnv1a64(BUCKET_SEED, token.as_bytes()) % EMBEDDING_DIM as u64) as usize;
            let sign = if fnv1a64(SIGN_SEED, token.as_bytes()) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        if !any {
            return Err("text has no word tokens".into());
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err("hashed token counts cancel to the zero vector".into());
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-{EMBEDDING_DIM}")
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, TransportError> {
        Self::vectorize(text).map_err(TransportError)
    }
}

/// Returns the same payload for every request; counts calls.
#[derive(Debug, Default)]
pub struct CannedCaptioner {
    pub payload: String,
    pub calls: std::sync::atomic::AtomicUsize,
}

impl CannedCaptioner {
    pub fn new(payload: impl Into<String>) -> Self {
        Self {
            payload: payload.into(),
            calls: Default::default(),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl CaptionProvider for CannedCaptioner {
    fn id(&self) -> String {
        format!("canned-{}", &sha256_hex(self.payload.as_bytes())[..12])
    }

    fn complete(&self, _prompt: &str, _image_png: &[u8]) -> std::result::Result<String, TransportError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(self.payload.clone())
    }
}

/// Offline captioner that reads colour statistics inside the alpha mask.
///
/// Vegetation is the mean of `(G − (R + B) / 2) / 110` over masked pixels,
/// clamped to [0, 1]. It is quantized to 20 steps and spread over the five
/// factors as "lush"/"bare" words, so the bag-of-words embedding of the
/// caption varies linearly with the level.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageStatsCaptioner;

const VEG_GREEN_SPAN: f64 = 110.0;

impl ImageStatsCaptioner {
    /// Mean vegetation index inside the mask of an RGBA image.
    pub fn vegetation_index(img: &RasterImage) -> Option<f64> {
        if img.channels != 4 {
            return None;
        }
        let (sum, n) = img
            .data
            .chunks_exact(4)
            .filter(|p| p[3] >= 128)
            .fold((0.0, 0usize), |(s, n), p| {
                let g = p[1] as f64 - 0.5 * (p[0] as f64 + p[2] as f64);
                (s + g, n + 1)
            });
        (n > 0).then(|| (sum / n as f64 / VEG_GREEN_SPAN).clamp(0.0, 1.0))
    }

    pub fn caption_json(vegetation: f64) -> String {
        let level = (vegetation * 20.0).round() as i64;
        const NAMES: [(&str, &str); FACTOR_COUNT] = [
            ("dense tree canopy", "sparse tree canopy"),
            ("green courtyards", "paved courtyards"),
            ("vegetated roofs", "bare roofs"),
            ("shaded streets", "exposed streets"),
            ("open green space", "sealed surfaces"),
        ];
        let factors: Vec<Value> = NAMES
            .iter()
            .enumerate()
            .map(|(k, (high, low))| {
                let lush = (level - 4 * k as i64).clamp(0, 4) as usize;
                let words: Vec<&str> = std::iter::repeat("lush")
                    .take(lush)
                    .chain(std::iter::repeat("bare").take(4 - lush))
                    .collect();
                let name = if lush >= 2 { high } else { low };
                json!({
                    "name": name,
                    "description": format!("vegetation {}", words.join(" ")),
                    "confidence": 0.9 - 0.1 * k as f64,
                })
            })
            .collect();
        json!({ "factors": factors }).to_string()
    }
}

impl CaptionProvider for ImageStatsCaptioner {
    fn id(&self) -> String {
        "image-stats-v1".into()
    }

    fn complete(&self, _prompt: &str, image_png: &[u8]) -> std::result::Result<String, TransportError> {
        let img = RasterImage::decode(image_png, 4).map_err(TransportError)?;
        let veg = Self::vegetation_index(&img).unwrap_or(0.0);
        Ok(Self::caption_json(veg))
    }
}

/// Request/response dialect of an HTTP backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ApiFlavor {
    /// `{model, prompt, image{mime_type, data_base64}}` → `{text}`;
    /// `{model, input}` → `{embedding}`.
    #[default]
    Native,
    /// OpenAI-compatible `/chat/completions` and `/embeddings`.
    OpenaiCompatible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub flavor: ApiFlavor,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    /// Environment variable holding the API key; the key itself never lives in config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

fn default_timeout_s() -> u64 {
    120
}

struct HttpJson {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpJson {
    fn new(cfg: &HttpProviderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s)))
            .build()
            .into();
        let api_key = cfg
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Self { agent, api_key }
    }

    fn post(&self, url: &str, body: &Value) -> std::result::Result<Value, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| TransportError(format!("POST {url}: {e}")))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| TransportError(format!("response is not JSON: {e}")))
    }
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

pub struct HttpCaptionProvider {
    cfg: HttpProviderConfig,
    http: HttpJson,
}

impl HttpCaptionProvider {
    pub fn new(cfg: HttpProviderConfig) -> Self {
        let http = HttpJson::new(&cfg);
        Self { cfg, http }
    }
}

impl CaptionProvider for HttpCaptionProvider {
    fn id(&self) -> String {
        format!("http:{:?}:{}", self.cfg.flavor, self.cfg.model)
    }

    fn complete(&self, prompt: &str, image_png: &[u8]) -> std::result::Result<String, TransportError> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(image_png);
        let missing = || TransportError("response lacks the caption text".into());
        match self.cfg.flavor {
            ApiFlavor::Native => {
                let body = json!({
                    "model": self.cfg.model,
                    "prompt": prompt,
                    "image": {"mime_type": "image/png", "data_base64": b64},
                });
                let resp = self.http.post(&self.cfg.base_url, &body)?;
                resp.get("text").and_then(Value::as_str).map(str::to_owned).ok_or_else(missing)
            }
            ApiFlavor::OpenaiCompatible => {
                let body = json!({
                    "model": self.cfg.model,
                    "temperature": 0,
                    "response_format": {"type": "json_object"},
                    "messages": [{
                        "role": "user",
                        "content": [
                            {"type": "text", "text": prompt},
                            {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}},
                        ],
                    }],
                });
                let resp = self.http.post(&join_url(&self.cfg.base_url, "chat/completions"), &body)?;
                resp.pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_owned)
                    .ok_or_else(missing)
            }
        }
    }
}

pub struct HttpEmbeddingProvider {
    cfg: HttpProviderConfig,
    http: HttpJson,
}

impl HttpEmbeddingProvider {
    pub fn new(cfg: HttpProviderConfig) -> Self {
        let http = HttpJson::new(&cfg);
        Self { cfg, http }
    }
}

fn floats(v: Option<&Value>) -> std::result::Result<Vec<f64>, TransportError> {
    v.and_then(Value::as_array)
        .ok_or_else(|| TransportError("response lacks an embedding array".into()))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| TransportError("non-numeric embedding value".into())))
        .collect()
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> String {
        format!("http:{:?}:{}", self.cfg.flavor, self.cfg.model)
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, TransportError> {
        match self.cfg.flavor {
            ApiFlavor::Native => {
                let resp = self.http.post(
                    &self.cfg.base_url,
                    &json!({"model": self.cfg.model, "input": text}),
                )?;
                floats(resp.get("embedding"))
            }
            ApiFlavor::OpenaiCompatible => {
                let resp = self.http.post(
                    &join_url(&self.cfg.base_url, "embeddings"),
                    &json!({"model": self.cfg.model, "input": text, "dimensions": EMBEDDING_DIM}),
                )?;
                floats(resp.pointer("/data/0/embedding"))
            }
        }
    }
}

/// One line of an embeddings JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub values: Vec<f64>,
}
