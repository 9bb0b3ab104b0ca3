//! Wire protocol for external rewriters and embedding providers.
//!
//! Messages are single lines of UTF-8 JSON. Every message carries a
//! protocol version `v`, a host-assigned sequence number `seq` and a
//! `type` discriminator. Responses echo the `seq` (and, for rewrites, the
//! `query_id`) of the request they answer.
//!
//! The host owns the format gate and all scoring; adapters only produce
//! raw text and raw vectors.

mod channel;
mod env;
mod mock;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GrapeError, Result};
use crate::vecindex::{l2_normalize, Embedding};

pub use channel::{AdapterChannel, AdapterEmbedder, Dispatcher, StdioChannel, DEFAULT_TIMEOUT_MS};
pub use env::BridgeEnv;
pub use mock::{mock_rewriter, LookupEmbedder, MockAdapter, MockChannel, MockFaults};

pub const PROTOCOL_VERSION: u32 = 1;

/// Environment variable naming the adapter executable.
pub const ADAPTER_CMD_ENV: &str = "GRAPE_ADAPTER_CMD";

/// Prompt template selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Multilingual,
    Multimodal,
    Length,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [
        TemplateId::Multilingual,
        TemplateId::Multimodal,
        TemplateId::Length,
    ];

    /// Template text with a `{text}` placeholder.
    pub fn template(self) -> &'static str {
        match self {
            TemplateId::Multilingual => include_str!("../../templates/multilingual.txt"),
            TemplateId::Multimodal => include_str!("../../templates/multimodal.txt"),
            TemplateId::Length => include_str!("../../templates/length.txt"),
        }
    }

    /// Substitute `text` for `{text}`.
    pub fn render(self, text: &str) -> String {
        self.template().replace("{text}", text)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multilingual" => Ok(TemplateId::Multilingual),
            "multimodal" => Ok(TemplateId::Multimodal),
            "length" => Ok(TemplateId::Length),
            _ => Err(GrapeError::Parameter(format!("unknown template `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub query_id: u64,
    pub query_text: String,
    pub template_id: TemplateId,
    /// Verbatim template the adapter must fill in.
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub k: usize,
    pub sampling_seed: u64,
}

impl RewriteRequest {
    pub fn new(
        query_id: u64,
        query_text: impl Into<String>,
        template_id: TemplateId,
        image_ref: Option<String>,
        k: usize,
        sampling_seed: u64,
    ) -> Self {
        Self {
            query_id,
            query_text: query_text.into(),
            template_id,
            template: template_id.template().to_string(),
            image_ref,
            k,
            sampling_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub query_id: u64,
    pub raw_outputs: Vec<String>,
}

/// Exactly one of `texts` / `image_refs` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_refs: Option<Vec<String>>,
}

impl EmbedRequest {
    pub fn texts(texts: Vec<String>) -> Self {
        Self {
            texts: Some(texts),
            image_refs: None,
        }
    }

    pub fn len(&self) -> usize {
        self.texts
            .as_ref()
            .or(self.image_refs.as_ref())
            .map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub version: String,
    pub model_digests: BTreeMap<String, String>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    RewriteRequest(RewriteRequest),
    RewriteResponse(RewriteResponse),
    EmbedRequest(EmbedRequest),
    EmbedResponse(EmbedResponse),
    HealthRequest,
    HealthResponse(HealthResponse),
    Error(ErrorResponse),
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

impl Envelope {
    pub fn new(seq: u64, body: Body) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            seq,
            body,
        }
    }
}

fn protocol(msg: impl Into<String>) -> GrapeError {
    GrapeError::Protocol(msg.into())
}

/// Check the per-type invariants of a message.
pub fn check(msg: &Envelope) -> Result<()> {
    if msg.v != PROTOCOL_VERSION {
        return Err(protocol(format!("unsupported protocol version {}", msg.v)));
    }
    match &msg.body {
        Body::RewriteRequest(r) => {
            let multimodal = r.template_id == TemplateId::Multimodal;
            if multimodal && r.image_ref.is_none() {
                return Err(protocol("multimodal rewrite request needs an image_ref"));
            }
            if !multimodal && r.image_ref.is_some() {
                return Err(protocol("image_ref is only allowed for multimodal requests"));
            }
            if r.k == 0 {
                return Err(protocol("rewrite request asks for zero outputs"));
            }
        }
        Body::EmbedRequest(e) => match (&e.texts, &e.image_refs) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(protocol("embed request needs exactly one of texts / image_refs")),
        },
        Body::EmbedResponse(e) => {
            if e.vectors.iter().flatten().any(|x| !x.is_finite()) {
                return Err(protocol("embedding contains non-finite values"));
            }
        }
        _ => {}
    }
    Ok(())
}

/// Serialize to one newline-terminated line.
pub fn encode(msg: &Envelope) -> Result<Vec<u8>> {
    check(msg)?;
    let mut line = serde_json::to_vec(msg)?;
    line.push(b'\n');
    Ok(line)
}

pub fn decode(line: &[u8]) -> Result<Envelope> {
    let msg: Envelope = serde_json::from_slice(trim_newline(line))
        .map_err(|e| protocol(format!("malformed message: {e}")))?;
    check(&msg)?;
    Ok(msg)
}

fn trim_newline(line: &[u8]) -> &[u8] {
    let mut l = line;
    while let [rest @ .., b'\n' | b'\r'] = l {
        l = rest;
    }
    l
}

/// Host-side acceptance of an adapter vector: finite, right width, unit
/// norm. Vectors already at unit norm to within `1e-12` keep their bits;
/// anything else is rescaled.
pub fn accept_vector(v: Vec<f64>, dim: usize) -> Result<Embedding> {
    if v.len() != dim {
        return Err(protocol(format!(
            "embedding has dimension {}, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(protocol("embedding contains non-finite values"));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() <= 1e-12 {
        return Embedding::from_unit(v).map_err(|_| protocol("bad embedding"));
    }
    l2_normalize(&v).map_err(|_| protocol("zero embedding"))
}

/// Something that turns texts into retrieval-space embeddings.
pub trait EmbeddingProvider {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<Embedding>>;
}
