//! In-process adapter double that speaks the wire protocol.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    decode, encode, AdapterChannel, Body, EmbedResponse, EmbeddingProvider, Envelope,
    ErrorResponse, HealthResponse, RewriteRequest, RewriteResponse,
};
use crate::error::{GrapeError, Result};
use crate::optim::derive_seed;
use crate::synthenv::Testbed;
use crate::vecindex::Embedding;

const MALFORMED_KINDS: u64 = 6;

/// Deterministic stand-in for an LLM rewriter.
///
/// Each output answers with the query text itself. Output `i` is malformed
/// with probability `malform_rate`, drawn from a stream keyed by the
/// request's seed, its text and `i`.
pub fn mock_rewriter(req: &RewriteRequest, malform_rate: f64) -> RewriteResponse {
    let text_key = text_hash(&req.query_text);
    let raw_outputs = (0..req.k)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(req.sampling_seed, &[text_key, i as u64]));
            let malformed = rng.random::<f64>() < malform_rate;
            let t = &req.query_text;
            if !malformed {
                return format!("<think>rewrite of query {}</think><answer>{t}</answer>", req.query_id);
            }
            match rng.random_range(0..MALFORMED_KINDS) {
                0 => format!("<answer>{t}</answer>"),
                1 => format!("<answer>{t}</answer><think>reversed</think>"),
                2 => "<think>nothing to say</think><answer>  </answer>".to_string(),
                3 => format!("<think><think>nested</think></think><answer>{t}</answer>"),
                4 => format!("<think>chatty</think><answer>{t}</answer> hope this helps"),
                _ => format!("<think>cut off</think><answer>{t}"),
            }
        })
        .collect();
    RewriteResponse {
        query_id: req.query_id,
        raw_outputs,
    }
}

fn text_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// "Embedder" that looks texts up in a fixed table.
#[derive(Debug, Clone, Default)]
pub struct LookupEmbedder {
    table: HashMap<String, Embedding>,
}

impl LookupEmbedder {
    pub fn new(table: HashMap<String, Embedding>) -> Self {
        Self { table }
    }

    /// Every action label of the testbed mapped to its embedding.
    pub fn from_testbed(tb: &Testbed) -> Self {
        let table = tb
            .actions
            .iter()
            .flatten()
            .map(|a| (a.label.clone(), a.embedding.clone()))
            .collect();
        Self { table }
    }

    pub fn lookup(&self, text: &str) -> Option<&Embedding> {
        self.table.get(text)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbeddingProvider for LookupEmbedder {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| {
                self.lookup(t)
                    .cloned()
                    .ok_or_else(|| GrapeError::Protocol(format!("no embedding for `{t}`")))
            })
            .collect()
    }
}

/// Protocol-level mock: answers rewrite requests with [`mock_rewriter`]
/// and embed requests from a [`LookupEmbedder`].
#[derive(Debug, Clone)]
pub struct MockAdapter {
    pub embedder: LookupEmbedder,
    pub malform_rate: f64,
    pub dim: usize,
}

impl MockAdapter {
    pub fn new(embedder: LookupEmbedder, malform_rate: f64, dim: usize) -> Self {
        Self {
            embedder,
            malform_rate,
            dim,
        }
    }

    pub fn handle(&mut self, msg: &Envelope) -> Envelope {
        let body = match &msg.body {
            Body::RewriteRequest(r) => Body::RewriteResponse(mock_rewriter(r, self.malform_rate)),
            Body::EmbedRequest(e) => match &e.texts {
                Some(texts) => match self.embedder.embed_texts(texts) {
                    Ok(vs) => Body::EmbedResponse(EmbedResponse {
                        vectors: vs.into_iter().map(Embedding::into_inner).collect(),
                    }),
                    Err(err) => error_body(None, err.to_string()),
                },
                None => error_body(None, "mock adapter has no image encoder".into()),
            },
            Body::HealthRequest => Body::HealthResponse(HealthResponse {
                version: "mock-1".into(),
                model_digests: BTreeMap::from([
                    ("rewriter".to_string(), "mock".to_string()),
                    ("embedder".to_string(), format!("lookup:{}", self.embedder.len())),
                ]),
                dim: self.dim,
            }),
            other => error_body(None, format!("unexpected message {other:?}")),
        };
        Envelope::new(msg.seq, body)
    }
}

fn error_body(query_id: Option<u64>, message: String) -> Body {
    Body::Error(ErrorResponse { query_id, message })
}

/// Faults a [`MockChannel`] injects between host and adapter.
#[derive(Debug, Clone, Default)]
pub struct MockFaults {
    /// Requests whose response never arrives.
    pub drop_seqs: BTreeSet<u64>,
    /// Drop the response to every request with `seq % n == n - 1`.
    pub drop_every: Option<u64>,
    /// Rewrite responses carry one output fewer than asked for.
    pub short_outputs: bool,
    /// Deliver pending responses newest first.
    pub reverse_order: bool,
    /// Health responses announce this width instead of the adapter's.
    pub health_dim: Option<usize>,
}

impl MockFaults {
    fn drops(&self, seq: u64) -> bool {
        self.drop_seqs.contains(&seq) || self.drop_every.is_some_and(|n| n > 0 && seq % n == n - 1)
    }
}

/// In-memory channel to a [`MockAdapter`]; every message still goes
/// through the line codec. An empty queue reports a timeout immediately.
#[derive(Debug, Clone)]
pub struct MockChannel {
    pub adapter: MockAdapter,
    pub faults: MockFaults,
    pending: VecDeque<Vec<u8>>,
    dropped: usize,
}

impl MockChannel {
    pub fn new(adapter: MockAdapter) -> Self {
        Self::with_faults(adapter, MockFaults::default())
    }

    pub fn with_faults(adapter: MockAdapter, faults: MockFaults) -> Self {
        Self {
            adapter,
            faults,
            pending: VecDeque::new(),
            dropped: 0,
        }
    }

    /// Responses swallowed by the drop faults so far.
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

impl AdapterChannel for MockChannel {
    fn send(&mut self, line: &[u8]) -> Result<()> {
        let msg = decode(line)?;
        if self.faults.drops(msg.seq) {
            self.dropped += 1;
            return Ok(());
        }
        let mut reply = self.adapter.handle(&msg);
        match &mut reply.body {
            Body::RewriteResponse(r) if self.faults.short_outputs => {
                r.raw_outputs.pop();
            }
            Body::HealthResponse(h) => {
                if let Some(d) = self.faults.health_dim {
                    h.dim = d;
                }
            }
            _ => {}
        }
        self.pending.push_back(encode(&reply)?);
        Ok(())
    }

    fn recv(&mut self, _timeout: Duration) -> Result<Option<Vec<u8>>> {
        Ok(if self.faults.reverse_order {
            self.pending.pop_back()
        } else {
            self.pending.pop_front()
        })
    }
}
