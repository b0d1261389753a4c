//! Cross-encoder relevance scores from an external teacher.
//!
//! Scores come either from a precomputed score file keyed by
//! `(query_id, doc_id)` or from a scoring service speaking a one-shot JSON
//! protocol:
//!
//! ```text
//! POST <endpoint>   {"pairs": [{"query": "...", "doc": "..."}, ...]}
//! 200               {"scores": [0.91, -1.3, ...], "max_batch_size": 32}
//! 413               {"max_batch_size": 32}
//! ```
//!
//! `scores` is aligned with `pairs`. `max_batch_size` is optional; once the
//! server declares it the client never sends larger batches, and a 413
//! carrying it makes the client split and resend. Any other non-2xx status is
//! a transport error.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{read_records, record_error, write_records};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub query_id: String,
    pub doc_id: String,
    pub score: f64,
}

/// Precomputed teacher scores keyed by `(query_id, doc_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    scores: HashMap<(String, String), f64>,
}

impl ScoreSet {
    pub fn insert(&mut self, rec: PairScore) -> Result<()> {
        if !rec.score.is_finite() {
            return Err(Error::NonFinite(format!(
                "score for ({}, {})",
                rec.query_id, rec.doc_id
            )));
        }
        let key = (rec.query_id, rec.doc_id);
        if self.scores.contains_key(&key) {
            return Err(Error::DuplicatePair {
                query_id: key.0,
                doc_id: key.1,
            });
        }
        self.scores.insert(key, rec.score);
        Ok(())
    }

    /// The stored score, or `None` when the pair was never scored.
    pub fn score(&self, query_id: &str, doc_id: &str) -> Option<f64> {
        // HashMap<(String, String)> cannot be probed with borrowed halves.
        self.scores
            .get(&(query_id.to_string(), doc_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Records sorted by `(query_id, doc_id)`.
    pub fn records(&self) -> Vec<PairScore> {
        let mut out: Vec<PairScore> = self
            .scores
            .iter()
            .map(|((q, d), s)| PairScore {
                query_id: q.clone(),
                doc_id: d.clone(),
                score: *s,
            })
            .collect();
        out.sort_by(|a, b| (&a.query_id, &a.doc_id).cmp(&(&b.query_id, &b.doc_id)));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(path, &self.records())
    }
}

/// Score values arrive as raw JSON so that string spellings like `"NaN"`
/// are reported as non-finite rather than as a type error.
#[derive(Deserialize)]
struct RawPairScore {
    query_id: String,
    doc_id: String,
    score: serde_json::Value,
}

fn parse_score(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
}

pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let rows: Vec<(usize, RawPairScore)> = read_records(path)?;
    let mut set = ScoreSet::default();
    for (line, raw) in rows {
        let score = parse_score(&raw.score).ok_or_else(|| {
            record_error(path, line, format!("score is not a number: {}", raw.score))
        })?;
        if !score.is_finite() {
            return Err(record_error(
                path,
                line,
                format!("non-finite score for ({}, {})", raw.query_id, raw.doc_id),
            ));
        }
        set.insert(PairScore {
            query_id: raw.query_id,
            doc_id: raw.doc_id,
            score,
        })?;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextPair {
    pub query: String,
    pub doc: String,
}

impl TextPair {
    pub fn new(query: impl Into<String>, doc: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            doc: doc.into(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ScoreRequest<'a> {
    pub pairs: &'a [TextPair],
}

#[derive(Debug, Deserialize)]
pub struct ScoreResponse {
    #[serde(default)]
    pub scores: Vec<f64>,
    #[serde(default)]
    pub max_batch_size: Option<usize>,
}

/// What came back from one upstream exchange.
#[derive(Debug)]
pub enum BatchReply {
    Scores {
        scores: Vec<f64>,
        max_batch_size: Option<usize>,
    },
    /// The server refused the batch as too large and declared its limit.
    TooLarge { max_batch_size: usize },
}

/// One request/response exchange with a scoring service.
pub trait ScoreTransport: Send + Sync {
    fn exchange(&self, pairs: &[TextPair]) -> Result<BatchReply>;
}

/// HTTP transport for the JSON protocol described at module level.
#[derive(Debug)]
pub struct HttpTransport {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl ScoreTransport for HttpTransport {
    fn exchange(&self, pairs: &[TextPair]) -> Result<BatchReply> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(ScoreRequest { pairs })
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        if status == 413 {
            let body: ScoreResponse = resp
                .body_mut()
                .read_json()
                .map_err(|e| Error::Protocol(format!("unreadable 413 body: {e}")))?;
            return match body.max_batch_size {
                Some(n) if n > 0 => Ok(BatchReply::TooLarge { max_batch_size: n }),
                _ => Err(Error::Transport(
                    "HTTP 413 without a usable max_batch_size".into(),
                )),
            };
        }
        if !(200..300).contains(&status) {
            return Err(Error::Transport(format!(
                "{} answered HTTP {status}",
                self.endpoint
            )));
        }
        let body: ScoreResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Protocol(format!("malformed response body: {e}")))?;
        Ok(BatchReply::Scores {
            scores: body.scores,
            max_batch_size: body.max_batch_size,
        })
    }
}

#[derive(Default)]
struct Slot {
    outcome: Mutex<Option<std::result::Result<f64, String>>>,
    ready: Condvar,
}

impl Slot {
    fn resolve(&self, outcome: std::result::Result<f64, String>) {
        *self.outcome.lock().unwrap() = Some(outcome);
        self.ready.notify_all();
    }

    fn wait(&self) -> std::result::Result<f64, String> {
        let mut guard = self.outcome.lock().unwrap();
        while guard.is_none() {
            guard = self.ready.wait(guard).unwrap();
        }
        guard.clone().unwrap()
    }
}

#[derive(Default)]
struct GatewayState {
    cache: HashMap<TextPair, f64>,
    in_flight: HashMap<TextPair, Arc<Slot>>,
    max_batch_size: Option<usize>,
}

/// Caching client over a [`ScoreTransport`].
///
/// Identical pairs requested concurrently share a single upstream call.
pub struct Gateway<T: ScoreTransport> {
    transport: T,
    state: Mutex<GatewayState>,
    upstream_calls: AtomicUsize,
}

impl Gateway<HttpTransport> {
    pub fn http(endpoint: impl Into<String>) -> Self {
        Self::new(HttpTransport::new(endpoint, Duration::from_secs(60)))
    }
}

enum Claim {
    Cached(f64),
    Wait(Arc<Slot>),
    Owned,
}

impl<T: ScoreTransport> Gateway<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            state: Mutex::new(GatewayState::default()),
            upstream_calls: AtomicUsize::new(0),
        }
    }

    /// Number of upstream exchanges performed so far.
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn cached(&self, pair: &TextPair) -> Option<f64> {
        self.state.lock().unwrap().cache.get(pair).copied()
    }

    pub fn cache_len(&self) -> usize {
        self.state.lock().unwrap().cache.len()
    }

    /// One score per input pair, in input order.
    pub fn request_scores(&self, pairs: &[TextPair]) -> Result<Vec<f64>> {
        let mut claims = Vec::with_capacity(pairs.len());
        let mut owned: Vec<TextPair> = Vec::new();
        {
            let mut state = self.state.lock().unwrap();
            for pair in pairs {
                let claim = if let Some(&s) = state.cache.get(pair) {
                    Claim::Cached(s)
                } else if let Some(slot) = state.in_flight.get(pair) {
                    Claim::Wait(slot.clone())
                } else {
                    state
                        .in_flight
                        .insert(pair.clone(), Arc::new(Slot::default()));
                    owned.push(pair.clone());
                    Claim::Owned
                };
                claims.push(claim);
            }
        }

        let fetched = if owned.is_empty() {
            Ok(HashMap::new())
        } else {
            self.fetch(&owned)
        };

        {
            let mut state = self.state.lock().unwrap();
            for pair in &owned {
                let slot = state
                    .in_flight
                    .remove(pair)
                    .expect("owned pair is in flight");
                match &fetched {
                    Ok(map) => {
                        let s = map[pair];
                        state.cache.insert(pair.clone(), s);
                        slot.resolve(Ok(s));
                    }
                    Err(e) => slot.resolve(Err(e.to_string())),
                }
            }
        }
        let fetched = fetched?;

        pairs
            .iter()
            .zip(claims)
            .map(|(pair, claim)| match claim {
                Claim::Cached(s) => Ok(s),
                Claim::Owned => Ok(fetched[pair]),
                Claim::Wait(slot) => slot.wait().map_err(Error::Transport),
            })
            .collect()
    }

    fn fetch(&self, pairs: &[TextPair]) -> Result<HashMap<TextPair, f64>> {
        let mut out = HashMap::with_capacity(pairs.len());
        let mut start = 0;
        while start < pairs.len() {
            let limit = self.state.lock().unwrap().max_batch_size;
            let end = limit.map_or(pairs.len(), |n| (start + n).min(pairs.len()));
            let batch = &pairs[start..end];
            self.upstream_calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.exchange(batch)? {
                BatchReply::TooLarge { max_batch_size } => {
                    if limit.is_some_and(|n| n <= max_batch_size) || batch.len() <= max_batch_size {
                        return Err(Error::Protocol(format!(
                            "server rejected a batch of {} despite declaring limit {max_batch_size}",
                            batch.len()
                        )));
                    }
                    self.state.lock().unwrap().max_batch_size = Some(max_batch_size);
                }
                BatchReply::Scores {
                    scores,
                    max_batch_size,
                } => {
                    if scores.len() != batch.len() {
                        return Err(Error::Protocol(format!(
                            "sent {} pairs, received {} scores",
                            batch.len(),
                            scores.len()
                        )));
                    }
                    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
                        return Err(Error::Protocol(format!("non-finite score at position {i}")));
                    }
                    if let Some(n) = max_batch_size.filter(|&n| n > 0) {
                        self.state.lock().unwrap().max_batch_size = Some(n);
                    }
                    out.extend(batch.iter().cloned().zip(scores));
                    start = end;
                }
            }
        }
        Ok(out)
    }

    /// Writes the cache as `{"query", "doc", "score"}` lines, sorted.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let state = self.state.lock().unwrap();
        let mut rows: Vec<CacheRecord> = state
            .cache
            .iter()
            .map(|(p, s)| CacheRecord {
                query: p.query.clone(),
                doc: p.doc.clone(),
                score: *s,
            })
            .collect();
        rows.sort_by(|a, b| (&a.query, &a.doc).cmp(&(&b.query, &b.doc)));
        write_records(path, &rows)
    }

    pub fn load_cache(&self, path: &Path) -> Result<usize> {
        let rows: Vec<(usize, CacheRecord)> = read_records(path)?;
        let mut state = self.state.lock().unwrap();
        let n = rows.len();
        for (line, r) in rows {
            if !r.score.is_finite() {
                return Err(record_error(path, line, "non-finite cached score"));
            }
            state.cache.insert(TextPair::new(r.query, r.doc), r.score);
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    query: String,
    doc: String,
    score: f64,
}
