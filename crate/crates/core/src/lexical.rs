//! Okapi BM25 over an in-memory inverted index.
//!
//! Score of document `d` for query tokens `q_1..q_n`:
//!
//! ```text
//! Σ_i IDF(q_i) · f(q_i,d)·(k1+1) / (f(q_i,d) + k1·(1 − b + b·len(d)/avglen))
//! IDF(t) = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! Repeated query tokens contribute once per occurrence.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::ranking::{Channel, RankedList};

const INDEX_MAGIC: &str = "MARGINMINE-LEXICAL-INDEX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        let p = Self { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 > 0.0) {
            return Err(Error::invalid(format!(
                "bm25 k1 must be > 0, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::invalid(format!(
                "bm25 b must lie in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

/// Lowercased runs of Unicode alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    /// Postings per term, sorted by doc id.
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: BTreeMap<String, usize>,
    doc_count: usize,
    avg_length: f64,
    params: Bm25Params,
}

fn index_text(doc: &Document) -> String {
    match &doc.title {
        Some(title) if !title.trim().is_empty() => format!("{title} {}", doc.text),
        _ => doc.text.clone(),
    }
}

impl InvertedIndex {
    /// Builds the index. The title, when present, is indexed ahead of the body.
    pub fn build(corpus: &[Document], params: Bm25Params) -> Result<Self> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = BTreeMap::new();
        for doc in corpus {
            let tokens = tokenize(&index_text(doc));
            if doc_lengths.insert(doc.id.clone(), tokens.len()).is_some() {
                return Err(Error::DuplicateId {
                    kind: "document",
                    id: doc.id.clone(),
                });
            }
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc_id: doc.id.clone(),
                    tf: count,
                });
            }
        }
        for list in postings.values_mut() {
            list.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        }
        let doc_count = doc_lengths.len();
        let total: usize = doc_lengths.values().sum();
        Ok(Self {
            postings,
            doc_lengths,
            doc_count,
            avg_length: total as f64 / doc_count as f64,
            params,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    /// Number of distinct indexed terms.
    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn avg_length(&self) -> f64 {
        self.avg_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.doc_lengths.get(doc_id).copied()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.doc_lengths.keys().map(String::as_str)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn term_freq(&self, term: &str, doc_id: &str) -> u32 {
        let list = self.postings(term);
        list.binary_search_by(|p| p.doc_id.as_str().cmp(doc_id))
            .map(|i| list[i].tf)
            .unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf_from_counts(self.doc_count, self.doc_freq(term))
    }

    fn term_weight(&self, params: &Bm25Params, idf: f64, tf: u32, len: usize) -> f64 {
        let tf = f64::from(tf);
        let norm = 1.0 - params.b + params.b * len as f64 / self.avg_length;
        idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    /// BM25 score of one document for pre-tokenized query terms.
    pub fn score_tokens(
        &self,
        params: &Bm25Params,
        tokens: &[String],
        doc_id: &str,
    ) -> Result<f64> {
        let len = self
            .doc_length(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
        let mut score = 0.0;
        for term in tokens {
            let tf = self.term_freq(term, doc_id);
            if tf > 0 {
                score += self.term_weight(params, self.idf(term), tf, len);
            }
        }
        Ok(score)
    }

    pub fn bm25_score(&self, params: &Bm25Params, query: &str, doc_id: &str) -> Result<f64> {
        self.score_tokens(params, &tokenize(query), doc_id)
    }

    /// Top-`n` documents sharing at least one term with the query.
    pub fn search(&self, params: &Bm25Params, query: &str, n: usize) -> Result<RankedList> {
        if n == 0 {
            return Err(Error::invalid("search depth n must be >= 1"));
        }
        let tokens = tokenize(query);
        let mut acc: HashMap<&str, f64> = HashMap::new();
        // Per-document sums run in query-token order, same as `score_tokens`.
        for term in &tokens {
            let idf = self.idf(term);
            for p in self.postings(term) {
                let len = self.doc_lengths[&p.doc_id];
                *acc.entry(p.doc_id.as_str()).or_insert(0.0) +=
                    self.term_weight(params, idf, p.tf, len);
            }
        }
        RankedList::from_scores(
            Channel::Lexical,
            acc.into_iter().map(|(id, s)| (id.to_string(), s)),
            Some(n),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)
            .map_err(|e| Error::IndexFormat(format!("serialization failed: {e}")))?;
        let contents = format!("{INDEX_MAGIC} v{INDEX_VERSION}\n{body}\n");
        fs::write(path, contents).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (header, body) = contents
            .split_once('\n')
            .ok_or_else(|| Error::IndexFormat("missing header line".into()))?;
        let version = header
            .strip_prefix(INDEX_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix('v'))
            .ok_or_else(|| Error::IndexFormat(format!("bad magic header {header:?}")))?;
        if version != INDEX_VERSION.to_string() {
            return Err(Error::IndexFormat(format!(
                "unsupported index version {version}, expected {INDEX_VERSION}"
            )));
        }
        serde_json::from_str(body).map_err(|e| Error::IndexFormat(e.to_string()))
    }
}

/// Smoothed non-negative IDF.
pub fn idf_from_counts(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

pub fn build_index(corpus: &[Document], params: Bm25Params) -> Result<InvertedIndex> {
    InvertedIndex::build(corpus, params)
}

pub fn search_lexical(
    index: &InvertedIndex,
    params: &Bm25Params,
    query: &str,
    n: usize,
) -> Result<RankedList> {
    index.search(params, query, n)
}
