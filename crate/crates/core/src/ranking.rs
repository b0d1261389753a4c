use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{read_records, record_error, write_records};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Lexical,
    Semantic,
    Reranker,
    Fused,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Channel::Lexical => "lexical",
            Channel::Semantic => "semantic",
            Channel::Reranker => "reranker",
            Channel::Fused => "fused",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

/// Descending by score, then ascending by doc id.
pub(crate) fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// An ordered (doc id, score) list produced by one scorer or by fusion.
///
/// Scores are non-increasing and doc ids are unique; both are enforced by
/// the constructors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedList")]
pub struct RankedList {
    pub channel: Channel,
    entries: Vec<RankedEntry>,
}

#[derive(Deserialize)]
struct UncheckedList {
    channel: Channel,
    entries: Vec<RankedEntry>,
}

impl TryFrom<UncheckedList> for RankedList {
    type Error = Error;

    fn try_from(raw: UncheckedList) -> Result<Self> {
        Self::from_ordered(raw.channel, raw.entries)
    }
}

/// One query's ranked list, as persisted in run files
/// (`{"query_id", "channel", "entries": [{"doc_id", "score"}, ...]}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRun {
    pub query_id: String,
    #[serde(flatten)]
    pub list: RankedList,
}

pub fn save_runs(path: &Path, runs: &[QueryRun]) -> Result<()> {
    write_records(path, runs)
}

/// Loads a run file keyed by query id. Every line must carry `channel`.
pub fn load_runs(path: &Path, channel: Channel) -> Result<BTreeMap<String, RankedList>> {
    let rows: Vec<(usize, QueryRun)> = read_records(path)?;
    let mut out = BTreeMap::new();
    for (line, run) in rows {
        if run.list.channel != channel {
            return Err(record_error(
                path,
                line,
                format!("expected a {channel} run, found {}", run.list.channel),
            ));
        }
        if out.insert(run.query_id.clone(), run.list).is_some() {
            return Err(record_error(
                path,
                line,
                format!("duplicate query \"{}\"", run.query_id),
            ));
        }
    }
    Ok(out)
}

impl RankedList {
    /// Sorts arbitrary scored ids into rank order, keeping at most `limit`.
    pub fn from_scores(
        channel: Channel,
        scores: impl IntoIterator<Item = (String, f64)>,
        limit: Option<usize>,
    ) -> Result<Self> {
        let mut entries: Vec<RankedEntry> = scores
            .into_iter()
            .map(|(doc_id, score)| RankedEntry { doc_id, score })
            .collect();
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{channel} score for \"{}\"",
                    e.doc_id
                )));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "ranked-list document",
                    id: e.doc_id.clone(),
                });
            }
        }
        entries.sort_by(|a, b| rank_order(a.score, &a.doc_id, b.score, &b.doc_id));
        if let Some(n) = limit {
            entries.truncate(n);
        }
        Ok(Self { channel, entries })
    }

    /// Takes entries that are already in rank order. Fails if the order or
    /// uniqueness invariants do not hold.
    pub fn from_ordered(channel: Channel, entries: Vec<RankedEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !e.score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{channel} score for \"{}\"",
                    e.doc_id
                )));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "ranked-list document",
                    id: e.doc_id.clone(),
                });
            }
            if i > 0 && entries[i - 1].score < e.score {
                return Err(Error::invalid(format!(
                    "{channel} list scores increase at position {}",
                    i + 1
                )));
            }
        }
        Ok(Self { channel, entries })
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// 1-based rank of `doc_id`, if present.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.doc_id == doc_id)
            .map(|i| i + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorts_with_id_tiebreak() {
        let list = RankedList::from_scores(
            Channel::Lexical,
            vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)],
            None,
        )
        .unwrap();
        assert_eq!(list.ids().collect::<Vec<_>>(), vec!["c", "a", "b"]);
        assert_eq!(list.rank_of("b"), Some(3));
    }

    #[test]
    fn rejects_duplicates_and_unordered_input() {
        assert!(RankedList::from_scores(
            Channel::Semantic,
            vec![("a".into(), 1.0), ("a".into(), 0.5)],
            None
        )
        .is_err());
        let unordered = vec![
            RankedEntry {
                doc_id: "a".into(),
                score: 0.1,
            },
            RankedEntry {
                doc_id: "b".into(),
                score: 0.9,
            },
        ];
        assert!(RankedList::from_ordered(Channel::Reranker, unordered).is_err());
    }
}
