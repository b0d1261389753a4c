//! Reciprocal Rank Fusion and per-query teacher score sets.
//!
//! A document's fused score is `Σ 1/(k + rank)` over every input list that
//! contains it, with 1-based ranks. Lists that do not contain the document
//! contribute nothing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{read_records, write_records};
use crate::ranking::{rank_order, Channel, RankedList};

pub const DEFAULT_RRF_K: f64 = 60.0;

fn check_k(k: f64) -> Result<()> {
    if k.is_finite() && k > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("rrf k must be > 0, got {k}")))
    }
}

fn check_unique(list: &RankedList) -> Result<()> {
    let mut seen = HashSet::with_capacity(list.len());
    for id in list.ids() {
        if !seen.insert(id) {
            return Err(Error::DuplicateId {
                kind: "ranked-list document",
                id: id.to_string(),
            });
        }
    }
    Ok(())
}

/// Sum of reciprocal-rank terms, added in ascending rank order so the
/// result does not depend on the order the lists were supplied in.
fn reciprocal_sum(ranks: &mut [usize], k: f64) -> f64 {
    ranks.sort_unstable();
    ranks.iter().fold(0.0, |acc, &r| acc + 1.0 / (k + r as f64))
}

fn collect_ranks(lists: &[RankedList]) -> Result<BTreeMap<&str, Vec<usize>>> {
    let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for list in lists {
        check_unique(list)?;
        for (i, id) in list.ids().enumerate() {
            ranks.entry(id).or_default().push(i + 1);
        }
    }
    Ok(ranks)
}

pub fn rrf_fuse(lists: &[RankedList], k: f64) -> Result<RankedList> {
    if lists.is_empty() {
        return Err(Error::invalid("rrf_fuse needs at least one ranked list"));
    }
    check_k(k)?;
    let ranks = collect_ranks(lists)?;
    let fused = ranks
        .into_iter()
        .map(|(id, mut r)| (id.to_string(), reciprocal_sum(&mut r, k)));
    RankedList::from_scores(Channel::Fused, fused, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherCandidate {
    pub doc_id: String,
    #[serde(rename = "score")]
    pub fused_score: f64,
    #[serde(
        default,
        rename = "channels",
        skip_serializing_if = "BTreeMap::is_empty"
    )]
    pub per_channel: BTreeMap<Channel, ChannelScore>,
}

impl TeacherCandidate {
    pub fn channel_score(&self, channel: Channel) -> Option<f64> {
        self.per_channel.get(&channel).map(|c| c.score)
    }
}

/// Soft labels for one query: fused scores plus per-channel raw scores and ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherScoreSet {
    pub query_id: String,
    pub candidates: Vec<TeacherCandidate>,
}

impl TeacherScoreSet {
    pub fn get(&self, doc_id: &str) -> Option<&TeacherCandidate> {
        self.candidates.iter().find(|c| c.doc_id == doc_id)
    }
}

/// Fuses any number of channel lists for one query, keeping per-channel audit data.
///
/// Two lists from the same channel are allowed (the fusion sum is over lists),
/// but then only the first list's raw score is kept for that channel.
pub fn fuse_channels(query_id: &str, lists: &[RankedList], k: f64) -> Result<TeacherScoreSet> {
    let fused = rrf_fuse(lists, k)?;
    let mut audit: HashMap<&str, BTreeMap<Channel, ChannelScore>> = HashMap::new();
    for list in lists {
        for (i, e) in list.entries().iter().enumerate() {
            audit
                .entry(e.doc_id.as_str())
                .or_default()
                .entry(list.channel)
                .or_insert(ChannelScore {
                    score: e.score,
                    rank: i + 1,
                });
        }
    }
    let candidates = fused
        .entries()
        .iter()
        .map(|e| TeacherCandidate {
            doc_id: e.doc_id.clone(),
            fused_score: e.score,
            per_channel: audit.remove(e.doc_id.as_str()).unwrap_or_default(),
        })
        .collect();
    Ok(TeacherScoreSet {
        query_id: query_id.to_string(),
        candidates,
    })
}

pub fn build_teacher_scores(
    query_id: &str,
    lexical: &RankedList,
    semantic: &RankedList,
    reranker: &RankedList,
    k: f64,
) -> Result<TeacherScoreSet> {
    for (list, want) in [
        (lexical, Channel::Lexical),
        (semantic, Channel::Semantic),
        (reranker, Channel::Reranker),
    ] {
        if list.channel != want {
            return Err(Error::invalid(format!(
                "expected a {want} list, got {}",
                list.channel
            )));
        }
    }
    fuse_channels(
        query_id,
        &[lexical.clone(), semantic.clone(), reranker.clone()],
        k,
    )
}

/// Re-sorts candidates by fused score, ties by doc id.
pub(crate) fn sort_candidates(c: &mut [TeacherCandidate]) {
    c.sort_by(|a, b| rank_order(a.fused_score, &a.doc_id, b.fused_score, &b.doc_id));
}

pub fn save_teacher_scores(path: &Path, sets: &[TeacherScoreSet]) -> Result<()> {
    write_records(path, sets)
}

pub fn load_teacher_scores(path: &Path) -> Result<Vec<TeacherScoreSet>> {
    let rows: Vec<(usize, TeacherScoreSet)> = read_records(path)?;
    Ok(rows
        .into_iter()
        .map(|(_, mut set)| {
            sort_candidates(&mut set.candidates);
            set
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(channel: Channel, ids: &[&str]) -> RankedList {
        let n = ids.len() as f64;
        RankedList::from_scores(
            channel,
            ids.iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), n - i as f64)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_list_scores() {
        let fused = rrf_fuse(&[list(Channel::Lexical, &["a", "b"])], 60.0).unwrap();
        assert_eq!(fused.ids().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(fused.entries()[0].score, 1.0 / 61.0);
        assert_eq!(fused.entries()[1].score, 1.0 / 62.0);
        assert_eq!(fused.channel, Channel::Fused);
    }

    #[test]
    fn three_list_hand_value() {
        let lists = [
            list(Channel::Lexical, &["x", "o"]),
            list(Channel::Semantic, &["o", "x"]),
            list(Channel::Reranker, &["x"]),
        ];
        let fused = rrf_fuse(&lists, 60.0).unwrap();
        let x = fused
            .entries()
            .iter()
            .find(|e| e.doc_id == "x")
            .unwrap()
            .score;
        assert!((x - (1.0 / 61.0 + 1.0 / 62.0 + 1.0 / 61.0)).abs() < 1e-15);
        assert!((x - 0.048916).abs() < 1e-6);
    }

    #[test]
    fn absent_lists_contribute_nothing() {
        let lists = [
            list(Channel::Lexical, &["only"]),
            list(Channel::Semantic, &["other"]),
            list(Channel::Reranker, &["other"]),
        ];
        let fused = rrf_fuse(&lists, 60.0).unwrap();
        let only = fused.entries().iter().find(|e| e.doc_id == "only").unwrap();
        assert_eq!(only.score, 1.0 / 61.0);
    }

    #[test]
    fn empty_collection_and_bad_k() {
        assert!(rrf_fuse(&[], 60.0).is_err());
        assert!(rrf_fuse(&[list(Channel::Lexical, &["a"])], 0.0).is_err());
    }

    #[test]
    fn teacher_symmetry_cases() {
        let t = build_teacher_scores(
            "q",
            &list(Channel::Lexical, &["d"]),
            &list(Channel::Semantic, &["d"]),
            &list(Channel::Reranker, &["d"]),
            60.0,
        )
        .unwrap();
        assert_eq!(t.candidates.len(), 1);
        assert!((t.candidates[0].fused_score - 3.0 / 61.0).abs() < 1e-15);
        assert_eq!(t.candidates[0].per_channel.len(), 3);

        let t = build_teacher_scores(
            "q",
            &list(Channel::Lexical, &["a"]),
            &list(Channel::Semantic, &["b"]),
            &list(Channel::Reranker, &["c"]),
            60.0,
        )
        .unwrap();
        assert_eq!(t.candidates.len(), 3);
        assert!(t.candidates.iter().all(|c| c.fused_score == 1.0 / 61.0));
        assert_eq!(
            t.candidates
                .iter()
                .map(|c| c.doc_id.as_str())
                .collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
    }

    #[test]
    fn wrong_channel_tag_rejected() {
        let l = list(Channel::Lexical, &["a"]);
        assert!(build_teacher_scores("q", &l, &l, &l, 60.0).is_err());
    }

    #[test]
    fn duplicate_ids_inside_a_channel_rejected() {
        let dup = r#"{"channel":"reranker","entries":[{"doc_id":"a","score":2.0},{"doc_id":"a","score":1.0}]}"#;
        assert!(serde_json::from_str::<RankedList>(dup).is_err());
        let unsorted = r#"{"channel":"reranker","entries":[{"doc_id":"a","score":1.0},{"doc_id":"b","score":2.0}]}"#;
        assert!(serde_json::from_str::<RankedList>(unsorted).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let t = build_teacher_scores(
            "q1",
            &list(Channel::Lexical, &["a", "b"]),
            &list(Channel::Semantic, &["b", "c"]),
            &list(Channel::Reranker, &["c", "a"]),
            60.0,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_teacher_scores(f.path(), std::slice::from_ref(&t)).unwrap();
        assert_eq!(load_teacher_scores(f.path()).unwrap(), vec![t]);
    }
}
