use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    accept_vector, decode, encode, Body, EmbedRequest, EmbeddingProvider, Envelope,
    HealthResponse, RewriteRequest, RewriteResponse,
};
use crate::error::{GrapeError, Result};
use crate::vecindex::Embedding;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// A bidirectional line transport to one adapter.
pub trait AdapterChannel {
    fn send(&mut self, line: &[u8]) -> Result<()>;
    /// Next line from the adapter, or `None` once `timeout` elapses.
    fn recv(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>>;
}

/// Adapter running as a child process speaking on stdin/stdout.
pub struct StdioChannel {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<Vec<u8>>>,
}

impl StdioChannel {
    /// Launch `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut buf = Vec::new();
                match reader.read_until(b'\n', &mut buf) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(buf)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }

    /// Launch the adapter named by `GRAPE_ADAPTER_CMD`.
    pub fn from_env() -> Result<Self> {
        let cmd = std::env::var(super::ADAPTER_CMD_ENV).map_err(|_| {
            GrapeError::Parameter(format!("{} is not set", super::ADAPTER_CMD_ENV))
        })?;
        Self::spawn(&cmd)
    }
}

impl AdapterChannel for StdioChannel {
    fn send(&mut self, line: &[u8]) -> Result<()> {
        self.stdin.write_all(line)?;
        self.stdin.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        match self.lines.recv_timeout(timeout) {
            Ok(line) => Ok(Some(line?)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                Err(GrapeError::Protocol("adapter closed its output stream".into()))
            }
        }
    }
}

impl Drop for StdioChannel {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Sends requests over one channel and matches responses by `seq`.
///
/// Several requests may be in flight at once; responses that arrive for
/// another outstanding request are buffered until asked for, and late
/// responses to requests that already timed out are dropped.
pub struct Dispatcher<C> {
    channel: C,
    next_seq: u64,
    outstanding: HashMap<u64, Instant>,
    buffered: HashMap<u64, Envelope>,
    timeout: Duration,
}

impl<C: AdapterChannel> Dispatcher<C> {
    pub fn new(channel: C, timeout_ms: u64) -> Self {
        Self {
            channel,
            next_seq: 0,
            outstanding: HashMap::new(),
            buffered: HashMap::new(),
            timeout: Duration::from_millis(timeout_ms),
        }
    }

    pub fn channel(&self) -> &C {
        &self.channel
    }

    pub fn channel_mut(&mut self) -> &mut C {
        &mut self.channel
    }

    /// Write one request and return its sequence number.
    pub fn submit(&mut self, body: Body) -> Result<u64> {
        let seq = self.next_seq;
        self.channel.send(&encode(&Envelope::new(seq, body))?)?;
        self.next_seq += 1;
        self.outstanding.insert(seq, Instant::now() + self.timeout);
        Ok(seq)
    }

    /// Wait for the response to `seq`.
    pub fn wait(&mut self, seq: u64) -> Result<Body> {
        let Some(&deadline) = self.outstanding.get(&seq) else {
            return Err(GrapeError::State(format!("no outstanding request {seq}")));
        };
        loop {
            if let Some(msg) = self.buffered.remove(&seq) {
                self.outstanding.remove(&seq);
                return Ok(msg.body);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            let Some(line) = self.channel.recv(left)? else {
                self.outstanding.remove(&seq);
                return Err(GrapeError::Timeout(self.timeout.as_millis() as u64));
            };
            let msg = decode(&line)?;
            if msg.seq == seq {
                self.outstanding.remove(&seq);
                return Ok(msg.body);
            }
            if msg.seq >= self.next_seq {
                return Err(GrapeError::Protocol(format!(
                    "response for unknown request {}",
                    msg.seq
                )));
            }
            if self.outstanding.contains_key(&msg.seq) {
                self.buffered.insert(msg.seq, msg);
            } else {
                log::warn!("dropping late response for request {}", msg.seq);
            }
        }
    }

    /// Send `body` and wait for its response.
    pub fn dispatch(&mut self, body: Body) -> Result<Body> {
        let seq = self.submit(body)?;
        self.wait(seq)
    }

    pub fn rewrite(&mut self, req: RewriteRequest) -> Result<RewriteResponse> {
        self.rewrite_many(vec![req]).pop().expect("one request")
    }

    /// Pipeline several rewrite requests; results come back in request
    /// order, each checked for its `query_id` and output count.
    pub fn rewrite_many(&mut self, reqs: Vec<RewriteRequest>) -> Vec<Result<RewriteResponse>> {
        let mut sent = Vec::with_capacity(reqs.len());
        for req in reqs {
            let expect = (req.query_id, req.k);
            sent.push(self.submit(Body::RewriteRequest(req)).map(|seq| (seq, expect)));
        }
        sent.into_iter()
            .map(|s| {
                let (seq, (query_id, k)) = s?;
                match self.wait(seq)? {
                    Body::RewriteResponse(r) => {
                        if r.query_id != query_id {
                            return Err(GrapeError::Protocol(format!(
                                "response for query {} answered request for query {query_id}",
                                r.query_id
                            )));
                        }
                        if r.raw_outputs.len() != k {
                            return Err(GrapeError::Protocol(format!(
                                "expected {k} outputs, got {}",
                                r.raw_outputs.len()
                            )));
                        }
                        Ok(r)
                    }
                    other => Err(unexpected("rewrite_response", other)),
                }
            })
            .collect()
    }

    /// Embed `req`; vectors are checked and normalized host-side.
    pub fn embed(&mut self, req: EmbedRequest, dim: usize) -> Result<Vec<Embedding>> {
        let n = req.len();
        match self.dispatch(Body::EmbedRequest(req))? {
            Body::EmbedResponse(r) => {
                if r.vectors.len() != n {
                    return Err(GrapeError::Protocol(format!(
                        "expected {n} vectors, got {}",
                        r.vectors.len()
                    )));
                }
                r.vectors.into_iter().map(|v| accept_vector(v, dim)).collect()
            }
            other => Err(unexpected("embed_response", other)),
        }
    }

    pub fn healthcheck(&mut self) -> Result<HealthResponse> {
        match self.dispatch(Body::HealthRequest)? {
            Body::HealthResponse(h) => Ok(h),
            other => Err(unexpected("health_response", other)),
        }
    }

    /// Fail unless the adapter embeds into `dim` dimensions.
    pub fn ensure_dim(&mut self, dim: usize) -> Result<HealthResponse> {
        let h = self.healthcheck()?;
        if h.dim != dim {
            return Err(GrapeError::Protocol(format!(
                "adapter embeds into {} dimensions, corpus has {dim}",
                h.dim
            )));
        }
        Ok(h)
    }
}

/// Embeds through the adapter; the width comes from its healthcheck.
pub struct AdapterEmbedder<'a, C> {
    pub dispatcher: &'a mut Dispatcher<C>,
    pub dim: usize,
}

impl<C: AdapterChannel> EmbeddingProvider for AdapterEmbedder<'_, C> {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<Embedding>> {
        self.dispatcher.embed(EmbedRequest::texts(texts.to_vec()), self.dim)
    }
}

fn unexpected(wanted: &str, got: Body) -> GrapeError {
    match got {
        Body::Error(e) => GrapeError::Protocol(format!("adapter error: {}", e.message)),
        other => GrapeError::Protocol(format!("expected {wanted}, got {other:?}")),
    }
}
