//! Corpus, query, qrels, and raw training-pair stores.
//!
//! Everything here is loaded from line-delimited JSON and is immutable after
//! load. Pair expansion and deduplication operate on in-memory collections.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::jsonl::{read_records, record_error};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub task: String,
}

/// A relevance judgment. Labels are positive integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Qrel {
    pub query_id: String,
    pub doc_id: String,
    pub label: u32,
}

/// A query with one or more positive passages, as found in raw training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPair {
    pub query: String,
    pub positives: Vec<String>,
    #[serde(rename = "task")]
    pub source_task: String,
}

/// A single (query, positive) training instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryPositive {
    pub query: String,
    pub positive: String,
    #[serde(rename = "task")]
    pub source_task: String,
}

/// Documents in file order with an id lookup table.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and empty texts.
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if doc.text.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "document \"{}\" has empty text",
                    doc.id
                )));
            }
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "document",
                    id: doc.id.clone(),
                });
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let rows: Vec<(usize, Document)> = read_records(path)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut docs = Vec::with_capacity(rows.len());
    for (line, doc) in rows {
        if doc.text.trim().is_empty() {
            return Err(record_error(
                path,
                line,
                format!("document \"{}\" has empty text", doc.id),
            ));
        }
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId {
                kind: "document",
                id: doc.id,
            });
        }
        docs.push(doc);
    }
    Corpus::new(docs)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let rows: Vec<(usize, Query)> = read_records(path)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut out = Vec::with_capacity(rows.len());
    for (_, q) in rows {
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId {
                kind: "query",
                id: q.id,
            });
        }
        out.push(q);
    }
    Ok(out)
}

pub fn load_qrels(path: &Path) -> Result<Vec<Qrel>> {
    let rows: Vec<(usize, Qrel)> = read_records(path)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut out = Vec::with_capacity(rows.len());
    for (line, qrel) in rows {
        if qrel.label < 1 {
            return Err(record_error(path, line, "qrel label must be >= 1"));
        }
        if !seen.insert((qrel.query_id.clone(), qrel.doc_id.clone())) {
            return Err(record_error(
                path,
                line,
                format!("duplicate judgment ({}, {})", qrel.query_id, qrel.doc_id),
            ));
        }
        out.push(qrel);
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<RawPair>> {
    let rows: Vec<(usize, RawPair)> = read_records(path)?;
    rows.into_iter()
        .map(|(line, pair)| {
            if pair.positives.is_empty() {
                Err(record_error(path, line, "pair has no positives"))
            } else {
                Ok(pair)
            }
        })
        .collect()
}

/// Splits each multi-positive pair into one record per positive, keeping order.
pub fn expand_pairs(pairs: &[RawPair]) -> Vec<QueryPositive> {
    pairs
        .iter()
        .flat_map(|pair| {
            pair.positives.iter().map(move |positive| QueryPositive {
                query: pair.query.clone(),
                positive: positive.clone(),
                source_task: pair.source_task.clone(),
            })
        })
        .collect()
}

/// NFC-normalized, whitespace-trimmed form used as the deduplication key.
pub fn normalize_key(text: &str) -> String {
    text.trim().nfc().collect::<String>().trim().to_string()
}

/// Drops records whose normalized (query, positive) pair was already seen.
/// First occurrence wins and relative order is preserved.
pub fn dedup(records: &[QueryPositive]) -> Vec<QueryPositive> {
    let mut seen = HashSet::with_capacity(records.len());
    records
        .iter()
        .filter(|r| seen.insert((normalize_key(&r.query), normalize_key(&r.positive))))
        .cloned()
        .collect()
}
