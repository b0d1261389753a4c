//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use marginmine::corpus::Document;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Okapi BM25 by full scan: every document is tokenized and scored from
/// scratch for every query. Returns matching documents, best first, ties by id.
pub fn naive_bm25(docs: &[Document], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let tokenized: Vec<(String, Vec<String>)> = docs
        .iter()
        .map(|d| {
            let full = match &d.title {
                Some(t) if !t.trim().is_empty() => format!("{t} {}", d.text),
                _ => d.text.clone(),
            };
            (d.id.clone(), words(&full))
        })
        .collect();
    let n = tokenized.len() as f64;
    let avgdl = tokenized.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / n;
    let q = words(query);
    let mut out = Vec::new();
    for (id, toks) in &tokenized {
        if !q.iter().any(|t| toks.contains(t)) {
            continue;
        }
        let dl = toks.len() as f64;
        let mut score = 0.0;
        for term in &q {
            let df = tokenized.iter().filter(|(_, t)| t.contains(term)).count() as f64;
            let tf = toks.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        out.push((id.clone(), score));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// RRF straight from the definition. Each list is doc ids in rank order.
pub fn brute_rrf(lists: &[Vec<String>], k: f64) -> Vec<(String, f64)> {
    let mut ranks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for list in lists {
        for (pos, id) in list.iter().enumerate() {
            ranks.entry(id.clone()).or_default().push(pos + 1);
        }
    }
    let mut out: Vec<(String, f64)> = ranks
        .into_iter()
        .map(|(id, mut r)| {
            r.sort();
            let mut s = 0.0;
            for rank in r {
                s += 1.0 / (k + rank as f64);
            }
            (id, s)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

const VOCAB: &[&str] = &[
    "river", "bank", "money", "loan", "water", "fish", "boat", "interest", "rate", "stream",
    "current", "flow", "credit", "deposit", "shore", "bridge", "account", "mountain", "snow",
    "valley",
];

/// Twenty short documents over a small shared vocabulary, some titled.
pub fn bm25_fixture() -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..20)
        .map(|i| {
            let len = rng.random_range(3..15);
            let text = (0..len)
                .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
                .collect::<Vec<_>>()
                .join(if i % 3 == 0 { ", " } else { " " });
            let title = (i % 4 == 0).then(|| VOCAB[i % VOCAB.len()].to_uppercase());
            Document {
                id: format!("doc{i:02}"),
                title,
                text,
            }
        })
        .collect()
}

pub fn bm25_queries() -> Vec<&'static str> {
    vec![
        "river bank",
        "money loan interest rate",
        "water water flow",
        "snow",
        "Bridge over the RIVER",
        "account deposit credit bank money",
        "nothing matches here",
    ]
}

/// Five documents ranked by three channels, with partial coverage.
pub fn rrf_fixture() -> Vec<Vec<String>> {
    let l = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        l(&["d1", "d2", "d3", "d4"]),
        l(&["d3", "d1", "d5"]),
        l(&["d2", "d5", "d1", "d4", "d3"]),
    ]
}

/// Positive `pos` at 0.8 among candidates on both sides of the 0.95 margin,
/// including one at 0.9 that must never be mined and one exactly on the
/// 0.76 boundary.
pub fn margin_fixture() -> marginmine::fusion::TeacherScoreSet {
    use marginmine::fusion::{TeacherCandidate, TeacherScoreSet};
    let scores = [
        ("hard-0.90", 0.9),
        ("pos", 0.8),
        ("near-0.78", 0.78),
        ("edge-0.76", 0.76),
        ("c-0.70", 0.70),
        ("c-0.65", 0.65),
        ("c-0.60", 0.60),
        ("c-0.52", 0.52),
        ("c-0.41", 0.41),
        ("c-0.33", 0.33),
        ("c-0.20", 0.20),
        ("c-0.10", 0.10),
        ("c-0.05", 0.05),
    ];
    TeacherScoreSet {
        query_id: "q-margin".into(),
        candidates: scores
            .iter()
            .map(|(id, s)| TeacherCandidate {
                doc_id: id.to_string(),
                fused_score: *s,
                per_channel: Default::default(),
            })
            .collect(),
    }
}

#[derive(serde::Deserialize)]
pub struct CategoryCell {
    pub mean: f64,
    pub tasks: usize,
}

/// A published leaderboard row: per-category means, task counts, and the
/// printed mean over tasks.
#[derive(serde::Deserialize)]
pub struct LeaderboardRow {
    pub model: String,
    pub categories: BTreeMap<String, CategoryCell>,
    pub mean_task: f64,
}

pub fn leaderboard() -> Vec<LeaderboardRow> {
    let text = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/category_means.jsonl"),
    )
    .unwrap();
    text.lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Expands category means into per-task rows: every task in a category
/// carries the category mean, which preserves all category means.
pub fn leaderboard_rows(rows: &[LeaderboardRow]) -> Vec<marginmine::eval::EvalRow> {
    let mut out = Vec::new();
    for r in rows {
        for (cat, cell) in &r.categories {
            for t in 0..cell.tasks {
                out.push(marginmine::eval::EvalRow {
                    model: r.model.clone(),
                    task: format!("{cat}-{t}"),
                    category: cat.clone(),
                    score: cell.mean,
                });
            }
        }
    }
    out
}

/// A random similarity batch built from unit-scale embeddings: up to 6
/// queries, dimension at most 16, and at most 10 candidates per query
/// (positive, hard negatives, and in-batch positives together).
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    in_batch: bool,
) -> (
    marginmine::loss::SimBatch,
    marginmine::loss::TeacherDistribution,
) {
    let dim = rng.random_range(2..=16);
    let queries = rng.random_range(1..=if in_batch { 5 } else { 6 });
    let max_neg = if in_batch { 10 - queries } else { 9 };
    let negs = rng.random_range(1..=max_neg);
    let mut v = || -> Vec<f64> { (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let q: Vec<Vec<f64>> = (0..queries).map(|_| v()).collect();
    let p: Vec<Vec<f64>> = (0..queries).map(|_| v()).collect();
    let n: Vec<Vec<Vec<f64>>> = (0..queries)
        .map(|_| (0..negs).map(|_| v()).collect())
        .collect();
    let tau = rng.random_range(0.05..1.0);
    let batch = marginmine::loss::SimBatch::from_embeddings(&q, &p, &n, tau, in_batch).unwrap();
    let teacher = marginmine::loss::TeacherDistribution {
        scores: (0..queries)
            .map(|_| (0..=negs).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect(),
        tau: rng.random_range(0.1..2.0),
    };
    (batch, teacher)
}

/// A scoring service on a random local port. `reply` maps the list of
/// request pairs to `(status, body)`.
pub struct Server {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl Server {
    pub fn start<F>(reply: F) -> Self
    where
        F: Fn(&[Value]) -> (u16, Value) + Send + Sync + 'static,
    {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let url = format!("http://{}/score", server.server_addr().to_ip().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                counter.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let parsed: Value = serde_json::from_str(&body).unwrap();
                let pairs = parsed["pairs"].as_array().cloned().unwrap_or_default();
                let (status, out) = reply(&pairs);
                let resp = tiny_http::Response::from_string(out.to_string())
                    .with_status_code(status)
                    .with_header(
                        "Content-Type: application/json"
                            .parse::<tiny_http::Header>()
                            .unwrap(),
                    );
                let _ = req.respond(resp);
            }
        });
        Self { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Deterministic fake relevance: word overlap between query and doc.
pub fn overlap(pair: &Value) -> f64 {
    let q = pair["query"].as_str().unwrap();
    let d = pair["doc"].as_str().unwrap();
    q.split_whitespace().filter(|w| d.contains(w)).count() as f64
}
