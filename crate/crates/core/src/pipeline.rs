//! End-to-end mining run: first-stage retrieval, teacher reranking, RRF
//! fusion, margin filtering, seeded sampling, and training-record emission.
//!
//! Queries are processed on a bounded worker pool; results are written in
//! query-id order so the worker count never changes output bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::corpus::{load_corpus, load_qrels, load_queries, Corpus, Document, Query};
use crate::dense::{load_vectors, VectorStore};
use crate::error::{Error, Result};
use crate::forge::{
    emit_training_records, ForgeSettings, InstructionRegistry, PairSource, PositiveRef, Shot,
    TrainingRecord,
};
use crate::fusion::{build_teacher_scores, TeacherScoreSet};
use crate::jsonl::{read_records, to_jsonl_bytes};
use crate::lexical::InvertedIndex;
use crate::mining::{mine_negatives, MinedNegatives, ScoreSource};
use crate::ranking::{Channel, RankedList};
use crate::rerank::{load_scores, Gateway, ScoreSet, ScoreTransport, TextPair};

pub const TRAINING_FILE: &str = "training.jsonl";
pub const MINED_FILE: &str = "mined.jsonl";
pub const TEACHER_FILE: &str = "teacher.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Teacher relevance for a query against a batch of documents.
///
/// `None` marks a pair the source has no score for.
pub trait RerankSource: Sync {
    fn scores(&self, query: &Query, docs: &[&Document]) -> Result<Vec<Option<f64>>>;
}

impl RerankSource for ScoreSet {
    fn scores(&self, query: &Query, docs: &[&Document]) -> Result<Vec<Option<f64>>> {
        Ok(docs.iter().map(|d| self.score(&query.id, &d.id)).collect())
    }
}

impl<T: ScoreTransport> RerankSource for Gateway<T> {
    fn scores(&self, query: &Query, docs: &[&Document]) -> Result<Vec<Option<f64>>> {
        let pairs: Vec<TextPair> = docs
            .iter()
            .map(|d| TextPair::new(query.text.clone(), d.text.clone()))
            .collect();
        Ok(self.request_scores(&pairs)?.into_iter().map(Some).collect())
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub strict: Option<bool>,
    pub workers: Option<usize>,
}

impl RunOverrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.mining.seed = s;
        }
        if let Some(s) = self.strict {
            cfg.strict = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Effective configuration, minus settings that cannot change output
    /// bytes (`workers`, `paths.output_dir`, `paths.reranker_cache`).
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, String>,
    pub queries: usize,
    pub records: usize,
    pub shortfalls: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Canonical JSON of the settings that influence output, and its SHA-256.
pub fn config_fingerprint(cfg: &PipelineConfig) -> Result<(serde_json::Value, String)> {
    let mut value = serde_json::to_value(cfg)
        .map_err(|e| Error::invalid(format!("config serialization: {e}")))?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("workers");
        if let Some(paths) = obj.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("output_dir");
            paths.remove("reranker_cache");
        }
    }
    // serde_json::Value maps are ordered, so this is canonical.
    let bytes = serde_json::to_vec(&value).expect("value serializes");
    Ok((value, sha256_hex(&bytes)))
}

#[derive(Debug, Deserialize)]
struct ShotRow {
    task: String,
    query: String,
    passage: String,
}

pub fn load_shots(path: &Path) -> Result<HashMap<String, Vec<Shot>>> {
    let rows: Vec<(usize, ShotRow)> = read_records(path)?;
    let mut out: HashMap<String, Vec<Shot>> = HashMap::new();
    for (_, r) in rows {
        out.entry(r.task).or_default().push(Shot {
            query: r.query,
            passage: r.passage,
        });
    }
    Ok(out)
}

/// Loaded, immutable inputs for a run.
pub struct MiningInputs {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    /// Query id → positive doc ids, sorted.
    pub positives: BTreeMap<String, Vec<String>>,
    pub index: InvertedIndex,
    pub doc_vectors: VectorStore,
    pub query_vectors: VectorStore,
    pub registry: InstructionRegistry,
    pub forge: ForgeSettings,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(vec![format!("{key} is required")]))
}

impl MiningInputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let p = &cfg.paths;
        let corpus = load_corpus(required(&p.corpus, "paths.corpus")?)?;
        let queries = load_queries(required(&p.queries, "paths.queries")?)?;
        let qrels = load_qrels(required(&p.qrels, "paths.qrels")?)?;
        let doc_vectors = load_vectors(required(&p.doc_vectors, "paths.doc_vectors")?)?;
        let query_vectors = load_vectors(required(&p.query_vectors, "paths.query_vectors")?)?;

        let query_ids: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
        let mut positives: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for q in &qrels {
            if !query_ids.contains(q.query_id.as_str()) {
                return Err(Error::invalid(format!(
                    "qrels reference unknown query \"{}\"",
                    q.query_id
                )));
            }
            if corpus.get(&q.doc_id).is_none() {
                return Err(Error::UnknownDocument(q.doc_id.clone()));
            }
            positives
                .entry(q.query_id.clone())
                .or_default()
                .push(q.doc_id.clone());
        }
        for list in positives.values_mut() {
            list.sort();
        }

        let mut registry = InstructionRegistry::builtin();
        if let Some(path) = &cfg.prompt.registry_overrides {
            registry.merge_overrides(path)?;
        }
        for q in &queries {
            registry.get(&q.task)?;
        }
        let shots = match &cfg.prompt.shots {
            Some(path) => load_shots(path)?,
            None => HashMap::new(),
        };
        let index = InvertedIndex::build(corpus.documents(), cfg.bm25)?;
        Ok(Self {
            corpus,
            queries,
            positives,
            index,
            doc_vectors,
            query_vectors,
            registry,
            forge: ForgeSettings {
                eos_marker: cfg.prompt.eos_marker.clone(),
                shots,
                num_negatives: cfg.mining.num_negatives,
            },
        })
    }
}

/// Everything produced for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub teacher: TeacherScoreSet,
    pub mined: Vec<MinedNegatives>,
    pub records: Vec<TrainingRecord>,
}

/// Builds the reranker channel from per-candidate teacher scores.
///
/// In strict mode a missing score is an error naming the pair; otherwise the
/// candidate is left out of the reranker list (it may still be fused from
/// the other channels).
pub fn reranker_list(
    query_id: &str,
    scores: impl IntoIterator<Item = (String, Option<f64>)>,
    strict: bool,
) -> Result<RankedList> {
    let mut kept = Vec::new();
    for (doc_id, score) in scores {
        match score {
            Some(s) => kept.push((doc_id, s)),
            None if strict => {
                return Err(Error::MissingScore {
                    query_id: query_id.to_string(),
                    doc_id,
                })
            }
            None => {}
        }
    }
    RankedList::from_scores(Channel::Reranker, kept, None)
}

/// Copy of `mined` whose scores come from `source`. Reranker scores are used
/// only when every document in the record has one, so a record never mixes
/// scales.
pub fn soft_labels(
    mined: &MinedNegatives,
    teacher: &TeacherScoreSet,
    source: ScoreSource,
) -> MinedNegatives {
    let score = |id: &str| {
        let c = teacher.get(id)?;
        match source {
            ScoreSource::Fused => Some(c.fused_score),
            ScoreSource::Reranker => c.channel_score(Channel::Reranker),
        }
    };
    let ids = std::iter::once(mined.positive_id.as_str())
        .chain(mined.negatives.iter().map(|n| n.doc_id.as_str()));
    let Some(scores) = ids.map(score).collect::<Option<Vec<f64>>>() else {
        return mined.clone();
    };
    let mut out = mined.clone();
    out.positive_score = scores[0];
    for (n, s) in out.negatives.iter_mut().zip(&scores[1..]) {
        n.score = *s;
    }
    out
}

/// Runs every stage for a single query.
pub fn mine_query(
    cfg: &PipelineConfig,
    inputs: &MiningInputs,
    reranker: &dyn RerankSource,
    query: &Query,
    positive_ids: &[String],
) -> Result<QueryOutput> {
    let depth = cfg.candidate_depth;
    let lexical = inputs
        .index
        .search(&cfg.bm25, &query.text, depth)
        .map_err(|e| e.in_stage("lexical", &query.id))?;
    let semantic = inputs
        .query_vectors
        .get(&query.id)
        .ok_or_else(|| Error::invalid(format!("no query vector for \"{}\"", query.id)))
        .and_then(|qv| inputs.doc_vectors.search(qv, depth))
        .map_err(|e| e.in_stage("semantic", &query.id))?;

    // Positives are always scored so that they carry a teacher score even
    // when neither first-stage channel retrieved them.
    let pool: BTreeSet<&str> = lexical
        .ids()
        .chain(semantic.ids())
        .chain(positive_ids.iter().map(String::as_str))
        .collect();
    let docs = pool
        .iter()
        .map(|id| {
            inputs
                .corpus
                .get(id)
                .ok_or_else(|| Error::UnknownDocument(id.to_string()))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("rerank", &query.id))?;
    let scores = reranker
        .scores(query, &docs)
        .map_err(|e| e.in_stage("rerank", &query.id))?;
    let reranked = reranker_list(
        &query.id,
        docs.iter().map(|d| d.id.clone()).zip(scores),
        cfg.strict,
    )
    .map_err(|e| e.in_stage("rerank", &query.id))?;

    let teacher = build_teacher_scores(&query.id, &lexical, &semantic, &reranked, cfg.rrf_k)
        .map_err(|e| e.in_stage("fuse", &query.id))?;

    let all_positives: HashSet<String> = positive_ids.iter().cloned().collect();
    let mined = positive_ids
        .iter()
        .map(|pid| mine_negatives(&teacher, pid, None, &all_positives, &cfg.mining))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("mine", &query.id))?;

    let pairs: Vec<PairSource> = positive_ids
        .iter()
        .map(|pid| PairSource {
            query_id: query.id.clone(),
            query: query.text.clone(),
            task: query.task.clone(),
            positive: PositiveRef::Doc(pid.clone()),
        })
        .collect();
    let mined_map: HashMap<(String, String), MinedNegatives> = mined
        .iter()
        .map(|m| {
            let labelled = soft_labels(m, &teacher, cfg.loss.soft_labels);
            ((m.query_id.clone(), m.positive_id.clone()), labelled)
        })
        .collect();
    let records = emit_training_records(
        &pairs,
        &mined_map,
        &inputs.corpus,
        &inputs.registry,
        &inputs.forge,
    )
    .map_err(|e| e.in_stage("emit", &query.id))?;

    Ok(QueryOutput {
        teacher,
        mined,
        records,
    })
}

/// Mines every query that has at least one judged positive, in query-id order.
pub fn mine_all(
    cfg: &PipelineConfig,
    inputs: &MiningInputs,
    reranker: &dyn RerankSource,
) -> Result<Vec<QueryOutput>> {
    let mut work: Vec<(&Query, &Vec<String>)> = inputs
        .queries
        .iter()
        .filter_map(|q| inputs.positives.get(&q.id).map(|p| (q, p)))
        .collect();
    work.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let results: Vec<Result<QueryOutput>> = pool.install(|| {
        work.par_iter()
            .map(|(q, p)| mine_query(cfg, inputs, reranker, q, p))
            .collect()
    });
    // First failure in query order, independent of scheduling.
    results.into_iter().collect()
}

struct Staged {
    tmp: Vec<PathBuf>,
}

impl Staged {
    fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = dir.join(format!(".{name}.partial"));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        self.tmp.push(tmp);
        Ok(())
    }

    fn commit(mut self, dir: &Path) -> Result<()> {
        for tmp in std::mem::take(&mut self.tmp) {
            let name = tmp
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix('.'))
                .and_then(|n| n.strip_suffix(".partial"))
                .expect("staged name")
                .to_string();
            let dest = dir.join(name);
            fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
        }
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for tmp in &self.tmp {
            let _ = fs::remove_file(tmp);
        }
    }
}

/// Runs the full pipeline and writes `training.jsonl`, `mined.jsonl`,
/// `teacher.jsonl`, and `manifest.json` to the output directory.
///
/// On failure nothing from this run is left behind.
pub fn run_mine(config: &PipelineConfig, overrides: &RunOverrides) -> Result<RunManifest> {
    let mut cfg = config.clone();
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let inputs = MiningInputs::load(&cfg)?;

    let outputs = match (&cfg.paths.reranker_scores, &cfg.paths.reranker_endpoint) {
        (Some(path), _) => {
            let set = load_scores(path)?;
            mine_all(&cfg, &inputs, &set)?
        }
        (None, Some(endpoint)) => {
            let gateway = Gateway::http(endpoint.clone());
            if let Some(cache) = cfg.paths.reranker_cache.as_deref().filter(|p| p.is_file()) {
                gateway.load_cache(cache)?;
            }
            let out = mine_all(&cfg, &inputs, &gateway)?;
            if let Some(cache) = &cfg.paths.reranker_cache {
                gateway.save_cache(cache)?;
            }
            out
        }
        (None, None) => unreachable!("validated above"),
    };

    let out_dir = required(&cfg.paths.output_dir, "paths.output_dir")?.to_path_buf();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let records: Vec<&TrainingRecord> = outputs.iter().flat_map(|o| &o.records).collect();
    let mined: Vec<&MinedNegatives> = outputs.iter().flat_map(|o| &o.mined).collect();
    let teacher: Vec<&TeacherScoreSet> = outputs.iter().map(|o| &o.teacher).collect();
    let training_bytes = to_jsonl_bytes(records.iter().copied())?;
    let mined_bytes = to_jsonl_bytes(mined.iter().copied())?;
    let teacher_bytes = to_jsonl_bytes(teacher.iter().copied())?;

    let (config_value, config_hash) = config_fingerprint(&cfg)?;
    let mut inputs_digest = BTreeMap::new();
    let p = &cfg.paths;
    for (name, path) in [
        ("corpus", &p.corpus),
        ("queries", &p.queries),
        ("qrels", &p.qrels),
        ("doc_vectors", &p.doc_vectors),
        ("query_vectors", &p.query_vectors),
        ("reranker_scores", &p.reranker_scores),
        ("shots", &cfg.prompt.shots),
        ("registry_overrides", &cfg.prompt.registry_overrides),
    ] {
        if let Some(path) = path {
            inputs_digest.insert(name.to_string(), digest_file(path)?);
        }
    }
    let manifest = RunManifest {
        config_hash,
        config: config_value,
        inputs: inputs_digest,
        outputs: BTreeMap::from([
            (TRAINING_FILE.to_string(), sha256_hex(&training_bytes)),
            (MINED_FILE.to_string(), sha256_hex(&mined_bytes)),
            (TEACHER_FILE.to_string(), sha256_hex(&teacher_bytes)),
        ]),
        queries: outputs.len(),
        records: records.len(),
        shortfalls: records.iter().filter(|r| r.shortfall).count(),
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    manifest_bytes.push(b'\n');

    let mut staged = Staged { tmp: Vec::new() };
    staged.write(&out_dir, TRAINING_FILE, &training_bytes)?;
    staged.write(&out_dir, MINED_FILE, &mined_bytes)?;
    staged.write(&out_dir, TEACHER_FILE, &teacher_bytes)?;
    staged.write(&out_dir, MANIFEST_FILE, &manifest_bytes)?;
    staged.commit(&out_dir)?;
    Ok(manifest)
}
