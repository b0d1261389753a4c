//! Adaptive-margin hard-negative mining.
//!
//! A candidate may serve as a negative only if its teacher score is at most
//! `positive_score × margin`; anything above that is treated as a likely
//! false negative. Survivors are truncated to the `top_k` best and a seeded
//! uniform subset of `num_negatives` is drawn from them.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{TeacherCandidate, TeacherScoreSet};
use crate::ranking::Channel;

/// Which teacher signal drives filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    Fused,
    Reranker,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreSource::Fused => "fused",
            ScoreSource::Reranker => "reranker",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub margin: f64,
    pub top_k: usize,
    pub num_negatives: usize,
    pub seed: u64,
    pub score_source: ScoreSource,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            margin: 0.95,
            top_k: 30,
            num_negatives: 7,
            seed: 42,
            score_source: ScoreSource::Fused,
        }
    }
}

impl MiningConfig {
    /// All violated constraints, named by config key.
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            out.push(format!(
                "{prefix}margin must lie in (0, 1], got {}",
                self.margin
            ));
        }
        if self.top_k == 0 {
            out.push(format!("{prefix}top_k must be >= 1"));
        }
        if self.num_negatives == 0 {
            out.push(format!("{prefix}num_negatives must be >= 1"));
        }
        if self.num_negatives > self.top_k {
            out.push(format!(
                "{prefix}num_negatives ({}) must not exceed {prefix}top_k ({})",
                self.num_negatives, self.top_k
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("mining.");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedNegatives {
    pub query_id: String,
    pub positive_id: String,
    pub positive_score: f64,
    pub threshold: f64,
    pub negatives: Vec<ScoredDoc>,
    pub shortfall: bool,
    pub seed: u64,
    pub score_source: ScoreSource,
}

pub fn margin_threshold(positive_score: f64, margin: f64) -> f64 {
    positive_score * margin
}

fn candidate_score(c: &TeacherCandidate, source: ScoreSource) -> Option<f64> {
    match source {
        ScoreSource::Fused => Some(c.fused_score),
        ScoreSource::Reranker => c.channel_score(Channel::Reranker),
    }
}

/// Resolves the positive's teacher score: an explicit value wins, otherwise
/// it is looked up in the candidate set.
pub fn positive_teacher_score(
    set: &TeacherScoreSet,
    positive_id: &str,
    positive_score: Option<f64>,
    source: ScoreSource,
) -> Result<f64> {
    positive_score
        .or_else(|| {
            set.get(positive_id)
                .and_then(|c| candidate_score(c, source))
        })
        .ok_or_else(|| {
            Error::invalid(format!(
                "positive \"{positive_id}\" has no {source} teacher score for query \"{}\"",
                set.query_id
            ))
        })
}

/// Candidates eligible as negatives, best first.
///
/// Drops the positive, anything in `exclude` (other known positives), every
/// candidate lacking a `source` score, and every candidate scoring strictly
/// above the margin threshold.
pub fn filter_candidates(
    set: &TeacherScoreSet,
    positive_id: &str,
    positive_score: Option<f64>,
    margin: f64,
    source: ScoreSource,
    exclude: &HashSet<String>,
) -> Result<Vec<ScoredDoc>> {
    let pos = positive_teacher_score(set, positive_id, positive_score, source)?;
    let threshold = margin_threshold(pos, margin);
    let mut out: Vec<ScoredDoc> = set
        .candidates
        .iter()
        .filter(|c| c.doc_id != positive_id && !exclude.contains(&c.doc_id))
        .filter_map(|c| {
            let score = candidate_score(c, source)?;
            (score <= threshold).then(|| ScoredDoc {
                doc_id: c.doc_id.clone(),
                score,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    Ok(out)
}

/// Per-query generator seed: SHA-256 over the global seed and the query id.
pub fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Draws negatives from the `top_k` head of `filtered` (sorted best first).
///
/// The sample keeps the survivors' score order. When fewer than
/// `num_negatives` survive, all of them are returned and `shortfall` is set.
pub fn sample_negatives(
    query_id: &str,
    positive_id: &str,
    positive_score: f64,
    filtered: &[ScoredDoc],
    config: &MiningConfig,
) -> MinedNegatives {
    let pool = &filtered[..filtered.len().min(config.top_k)];
    let shortfall = pool.len() < config.num_negatives;
    let negatives = if pool.len() <= config.num_negatives {
        pool.to_vec()
    } else {
        let mut rng = query_rng(config.seed, query_id);
        let mut picks =
            rand::seq::index::sample(&mut rng, pool.len(), config.num_negatives).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| pool[i].clone()).collect()
    };
    MinedNegatives {
        query_id: query_id.to_string(),
        positive_id: positive_id.to_string(),
        positive_score,
        threshold: margin_threshold(positive_score, config.margin),
        negatives,
        shortfall,
        seed: config.seed,
        score_source: config.score_source,
    }
}

/// Filter then sample for one (query, positive).
pub fn mine_negatives(
    set: &TeacherScoreSet,
    positive_id: &str,
    positive_score: Option<f64>,
    exclude: &HashSet<String>,
    config: &MiningConfig,
) -> Result<MinedNegatives> {
    config.validate()?;
    let pos = positive_teacher_score(set, positive_id, positive_score, config.score_source)?;
    let filtered = filter_candidates(
        set,
        positive_id,
        Some(pos),
        config.margin,
        config.score_source,
        exclude,
    )?;
    Ok(sample_negatives(
        &set.query_id,
        positive_id,
        pos,
        &filtered,
        config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ChannelScore;
    use std::collections::BTreeMap;

    fn set(entries: &[(&str, f64)]) -> TeacherScoreSet {
        TeacherScoreSet {
            query_id: "q".into(),
            candidates: entries
                .iter()
                .map(|(id, s)| TeacherCandidate {
                    doc_id: id.to_string(),
                    fused_score: *s,
                    per_channel: BTreeMap::new(),
                })
                .collect(),
        }
    }

    fn ids(v: &[ScoredDoc]) -> Vec<&str> {
        v.iter().map(|d| d.doc_id.as_str()).collect()
    }

    #[test]
    fn threshold_values() {
        assert_eq!(margin_threshold(0.8, 0.95), 0.8 * 0.95);
        assert!((margin_threshold(0.8, 0.95) - 0.76).abs() < 1e-15);
        assert_eq!(margin_threshold(0.37, 1.0), 0.37);
        assert_eq!(margin_threshold(10.0, 0.95), 9.5);
    }

    #[test]
    fn filter_drops_candidates_above_threshold() {
        let s = set(&[("d1", 0.9), ("p", 0.8), ("d2", 0.7), ("d3", 0.5)]);
        let out =
            filter_candidates(&s, "p", None, 0.95, ScoreSource::Fused, &HashSet::new()).unwrap();
        assert_eq!(ids(&out), vec!["d2", "d3"]);
    }

    #[test]
    fn boundary_candidate_is_kept() {
        let t = margin_threshold(0.8, 0.95);
        let s = set(&[("edge", t), ("p", 0.8)]);
        let out =
            filter_candidates(&s, "p", None, 0.95, ScoreSource::Fused, &HashSet::new()).unwrap();
        assert_eq!(ids(&out), vec!["edge"]);
    }

    #[test]
    fn positive_always_removed_and_missing_positive_errors() {
        let s = set(&[("p", 0.1), ("d", 0.05)]);
        let out = filter_candidates(
            &s,
            "p",
            Some(10.0),
            1.0,
            ScoreSource::Fused,
            &HashSet::new(),
        )
        .unwrap();
        assert_eq!(ids(&out), vec!["d"]);
        assert!(filter_candidates(
            &s,
            "absent",
            None,
            0.95,
            ScoreSource::Fused,
            &HashSet::new()
        )
        .is_err());
        assert!(filter_candidates(
            &s,
            "absent",
            Some(1.0),
            0.95,
            ScoreSource::Fused,
            &HashSet::new()
        )
        .is_ok());
    }

    #[test]
    fn reranker_source_uses_raw_channel_scores() {
        let mut s = set(&[("p", 0.05), ("a", 0.04), ("b", 0.03)]);
        for (c, r) in s.candidates.iter_mut().zip([5.0, 9.0, 1.0]) {
            c.per_channel
                .insert(Channel::Reranker, ChannelScore { score: r, rank: 1 });
        }
        let out =
            filter_candidates(&s, "p", None, 0.95, ScoreSource::Reranker, &HashSet::new()).unwrap();
        assert_eq!(
            out,
            vec![ScoredDoc {
                doc_id: "b".into(),
                score: 1.0
            }]
        );
    }

    fn survivors(n: usize) -> Vec<ScoredDoc> {
        (0..n)
            .map(|i| ScoredDoc {
                doc_id: format!("d{i:02}"),
                score: 1.0 - i as f64 * 0.01,
            })
            .collect()
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let cfg = MiningConfig {
            top_k: 10,
            num_negatives: 7,
            seed: 1234,
            ..Default::default()
        };
        let pool = survivors(20);
        let a = sample_negatives("q", "p", 1.0, &pool, &cfg);
        let b = sample_negatives("q", "p", 1.0, &pool, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.negatives.len(), 7);
        assert!(!a.shortfall);
        let top: HashSet<&str> = ids(&pool[..10]).into_iter().collect();
        assert!(a.negatives.iter().all(|n| top.contains(n.doc_id.as_str())));
    }

    #[test]
    fn shortfall_returns_everything() {
        let cfg = MiningConfig::default();
        let m = sample_negatives("q", "p", 1.0, &survivors(5), &cfg);
        assert_eq!(m.negatives.len(), 5);
        assert!(m.shortfall);
        let m = sample_negatives("q", "p", 1.0, &[], &cfg);
        assert!(m.negatives.is_empty() && m.shortfall);
    }

    #[test]
    fn config_validation() {
        let bad = MiningConfig {
            margin: 1.5,
            top_k: 3,
            num_negatives: 7,
            ..Default::default()
        };
        let p = bad.problems("mining.");
        assert_eq!(p.len(), 2);
        assert!(p[0].contains("mining.margin"));
        assert!(MiningConfig::default().validate().is_ok());
    }
}
