//! Pipeline configuration (TOML) and one-pass validation.
//!
//! ```toml
//! rrf_k = 60.0
//! candidate_depth = 50
//! strict = true
//! workers = 1
//!
//! [bm25]
//! k1 = 1.2
//! b = 0.75
//!
//! [mining]
//! margin = 0.95
//! top_k = 30
//! num_negatives = 7
//! seed = 42
//! score_source = "fused"      # or "reranker"
//!
//! [loss]
//! tau = 0.05
//! lambda = 0.5                # tau_teacher defaults to tau
//! soft_labels = "reranker"    # or "fused"
//!
//! [nli]
//! high = 1.0
//! low = 0.0
//!
//! [prompt]
//! eos_marker = "</s>"
//! shots = "shots.jsonl"       # optional {"task", "query", "passage"} lines
//! registry_overrides = "instructions.jsonl"   # optional
//!
//! [paths]
//! corpus = "corpus.jsonl"
//! queries = "queries.jsonl"
//! qrels = "qrels.jsonl"
//! doc_vectors = "doc_vectors.jsonl"
//! query_vectors = "query_vectors.jsonl"
//! reranker_scores = "reranker.jsonl"   # or reranker_endpoint = "http://..."
//! output_dir = "out"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::DEFAULT_EOS_MARKER;
use crate::fusion::DEFAULT_RRF_K;
use crate::lexical::Bm25Params;
use crate::mining::{MiningConfig, ScoreSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_teacher: Option<f64>,
    pub lambda: f64,
    /// Teacher signal written as soft scores into training records. With
    /// `reranker`, a record falls back to fused scores when any of its
    /// documents lacks a reranker score.
    pub soft_labels: ScoreSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            tau_teacher: None,
            lambda: 0.5,
            soft_labels: ScoreSource::Reranker,
        }
    }
}

impl LossConfig {
    pub fn teacher_tau(&self) -> f64 {
        self.tau_teacher.unwrap_or(self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NliConfig {
    pub high: f64,
    pub low: f64,
}

impl Default for NliConfig {
    fn default() -> Self {
        Self {
            high: 1.0,
            low: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub eos_marker: String,
    pub shots: Option<PathBuf>,
    pub registry_overrides: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            eos_marker: DEFAULT_EOS_MARKER.to_string(),
            shots: None,
            registry_overrides: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub doc_vectors: Option<PathBuf>,
    pub query_vectors: Option<PathBuf>,
    pub reranker_scores: Option<PathBuf>,
    pub reranker_endpoint: Option<String>,
    pub reranker_cache: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rrf_k: f64,
    /// Depth of each first-stage channel feeding the reranker.
    pub candidate_depth: usize,
    pub strict: bool,
    pub workers: usize,
    pub bm25: Bm25Params,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub nli: NliConfig,
    pub prompt: PromptConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rrf_k: DEFAULT_RRF_K,
            candidate_depth: 50,
            strict: true,
            workers: 1,
            bm25: Bm25Params::default(),
            mining: MiningConfig::default(),
            loss: LossConfig::default(),
            nli: NliConfig::default(),
            prompt: PromptConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Parses a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.corpus,
            &mut p.queries,
            &mut p.qrels,
            &mut p.doc_vectors,
            &mut p.query_vectors,
            &mut p.reranker_scores,
            &mut p.reranker_cache,
            &mut p.output_dir,
        ] {
            resolve(base, slot);
        }
        resolve(base, &mut self.prompt.shots);
        resolve(base, &mut self.prompt.registry_overrides);
    }

    /// Every range violation, without touching the filesystem.
    pub fn range_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rrf_k.is_finite() && self.rrf_k > 0.0) {
            out.push(format!("rrf_k must be > 0, got {}", self.rrf_k));
        }
        if self.candidate_depth == 0 {
            out.push("candidate_depth must be >= 1".into());
        }
        if self.workers == 0 {
            out.push("workers must be >= 1".into());
        }
        if !(self.bm25.k1.is_finite() && self.bm25.k1 > 0.0) {
            out.push(format!("bm25.k1 must be > 0, got {}", self.bm25.k1));
        }
        if !(0.0..=1.0).contains(&self.bm25.b) {
            out.push(format!("bm25.b must lie in [0, 1], got {}", self.bm25.b));
        }
        out.extend(self.mining.problems("mining."));
        if !(self.loss.tau.is_finite() && self.loss.tau > 0.0) {
            out.push(format!("loss.tau must be > 0, got {}", self.loss.tau));
        }
        if let Some(t) = self.loss.tau_teacher {
            if !(t.is_finite() && t > 0.0) {
                out.push(format!("loss.tau_teacher must be > 0, got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.loss.lambda) {
            out.push(format!(
                "loss.lambda must lie in [0, 1], got {}",
                self.loss.lambda
            ));
        }
        for (key, v) in [("nli.high", self.nli.high), ("nli.low", self.nli.low)] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{key} must lie in [0, 1], got {v}"));
            }
        }
        if self.nli.high <= self.nli.low {
            out.push(format!(
                "nli.high ({}) must exceed nli.low ({})",
                self.nli.high, self.nli.low
            ));
        }
        out
    }

    /// Path checks for the mining pipeline: required inputs exist and exactly
    /// one reranker source is configured.
    pub fn path_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let p = &self.paths;
        for (key, path) in [
            ("paths.corpus", &p.corpus),
            ("paths.queries", &p.queries),
            ("paths.qrels", &p.qrels),
            ("paths.doc_vectors", &p.doc_vectors),
            ("paths.query_vectors", &p.query_vectors),
        ] {
            match path {
                None => out.push(format!("{key} is required")),
                Some(path) if !path.is_file() => {
                    out.push(format!("{key}: {} does not exist", path.display()))
                }
                Some(_) => {}
            }
        }
        match (&p.reranker_scores, &p.reranker_endpoint) {
            (None, None) => out
                .push("one of paths.reranker_scores or paths.reranker_endpoint is required".into()),
            (Some(_), Some(_)) => out.push(
                "paths.reranker_scores and paths.reranker_endpoint are mutually exclusive".into(),
            ),
            (Some(path), None) if !path.is_file() => out.push(format!(
                "paths.reranker_scores: {} does not exist",
                path.display()
            )),
            _ => {}
        }
        if p.output_dir.is_none() {
            out.push("paths.output_dir is required".into());
        }
        for (key, path) in [
            ("prompt.shots", &self.prompt.shots),
            ("prompt.registry_overrides", &self.prompt.registry_overrides),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    out.push(format!("{key}: {} does not exist", path.display()));
                }
            }
        }
        out
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.range_problems();
        out.extend(self.path_problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Loads and fully checks a config file, reporting every problem at once.
pub fn validate_config(path: &Path) -> std::result::Result<PipelineConfig, Vec<String>> {
    let cfg = match PipelineConfig::load(path) {
        Ok(c) => c,
        Err(Error::Config(list)) => return Err(list),
        Err(e) => return Err(vec![e.to_string()]),
    };
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(problems)
    }
}
