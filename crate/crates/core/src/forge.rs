//! Training-record assembly: NLI → STS conversion, task instructions,
//! in-context prompt formatting, and the final join of pairs with mined
//! negatives and soft scores.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::jsonl::read_records;
use crate::mining::MinedNegatives;
use crate::rerank::{Gateway, ScoreTransport, TextPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "entailment" => Some(Self::Entailment),
            "neutral" => Some(Self::Neutral),
            "contradiction" => Some(Self::Contradiction),
            _ => None,
        }
    }
}

/// NLI input row. The label is kept as text so that unknown labels can be
/// reported with their record index during conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRecord {
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsRecord {
    pub sentence_a: String,
    pub sentence_b: String,
    pub similarity: f64,
    /// Optional teacher relevance for the pair, on the teacher's own scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_score: Option<f64>,
}

pub fn load_nli(path: &Path) -> Result<Vec<NliRecord>> {
    Ok(read_records(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Entailment → `high`, contradiction → `low`, neutral dropped. Order is kept.
pub fn convert_nli(records: &[NliRecord], high: f64, low: f64) -> Result<Vec<StsRecord>> {
    if !((0.0..=1.0).contains(&high) && (0.0..=1.0).contains(&low) && high > low) {
        return Err(Error::invalid(format!(
            "need 0 <= low < high <= 1, got low={low} high={high}"
        )));
    }
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let similarity = match NliLabel::parse(&r.label) {
            Some(NliLabel::Entailment) => high,
            Some(NliLabel::Contradiction) => low,
            Some(NliLabel::Neutral) => continue,
            None => {
                return Err(Error::invalid(format!(
                    "record {i}: unknown NLI label \"{}\"",
                    r.label
                )))
            }
        };
        out.push(StsRecord {
            sentence_a: r.premise.clone(),
            sentence_b: r.hypothesis.clone(),
            similarity,
            soft_score: None,
        });
    }
    Ok(out)
}

/// Scores every converted pair with the teacher and stores it as `soft_score`.
pub fn attach_soft_scores<T: ScoreTransport>(
    records: &mut [StsRecord],
    gateway: &Gateway<T>,
) -> Result<()> {
    let pairs: Vec<TextPair> = records
        .iter()
        .map(|r| TextPair::new(r.sentence_a.clone(), r.sentence_b.clone()))
        .collect();
    let scores = gateway.request_scores(&pairs)?;
    for (r, s) in records.iter_mut().zip(scores) {
        r.soft_score = Some(s);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Retrieval,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub instruction: String,
    pub kind: TaskKind,
}

const RETRIEVAL_TASKS: &[(&str, &str)] = &[
    ("ArguAna", "Given a claim, find documents that refute the claim."),
    ("ELI5", "Provided a user question, retrieve the highest voted answers on Reddit ELI5 forum."),
    ("FEVER", "Given a claim, retrieve documents that support or refute the claim."),
    ("FiQA2018", "Given a financial question, retrieve user replies that best answer the question."),
    ("HotpotQA", "Given a multi-hop question, retrieve documents that can help answer the question."),
    ("MSMARCO", "Given a web search query, retrieve relevant passages that answer the query."),
    ("Natural Question", "Given a question, retrieve Wikipedia passages that answer the question."),
    ("QuoraDupQuestion", "Given a question, retrieve questions that are semantically equivalent to the given question."),
    ("SQuAD", "Given a question, retrieve passages that answer the question"),
];

const OTHER_TASKS: &[(&str, &str)] = &[
    ("STS12", "Retrieve semantically similar text."),
    ("STS22", "Retrieve semantically similar text."),
    ("STSBenchmark", "Retrieve semantically similar text."),
    ("AmazonCounterfactualClassification", "Classify a given Amazon customer review text as either counterfactual or not-counterfactual."),
    ("AmazonReviewsClassification", "Classify the given Amazon review into its appropriate rating category."),
    ("Banking77Classification", "Given a online banking query, find the corresponding intents."),
    ("EmotionClassification", "Classify the emotion expressed in the given Twitter message into one of the six emotions: anger, fear, joy, love, sadness, and surprise."),
    ("ImdbClassification", "Classify the sentiment expressed in the given movie review text from the IMDB dataset."),
    ("MTOPIntentClassification", "Classify the intent of the given utterance in task-oriented conversation."),
    ("ToxicConversationsClassification", "Classify the given comments as either toxic or not toxic."),
    ("TweetSentimentExtractionClassification", "Classify the sentiment of a given tweet as either positive, negative, or neutral."),
    ("ArxivClusteringP2P", "Identify the main and secondary category of Arxiv papers based on the titles and abstracts."),
    ("ArxivClusteringS2S", "Identify the main and secondary category of Arxiv papers based on the titles."),
    ("BiorxivClusteringP2P", "Identify the main category of Biorxiv papers based on the titles and abstracts."),
    ("BiorxivClusteringS2S", "Identify the main category of Biorxiv papers based on the titles."),
    ("MedrxivClusteringP2P", "Identify the main category of Medrxiv papers based on the titles and abstracts."),
    ("MedrxivClusteringS2S", "Identify the main category of Medrxiv papers based on the titles."),
    ("RedditClustering", "Identify the topic or theme of Reddit posts based on the titles."),
    ("RedditClusteringS2S", "Identify the topic or theme of Reddit posts based on the titles and posts."),
    ("StackexchangeClustering", "Identify the topic or theme of StackExchange posts based on the titles."),
    ("StackexchangeClusteringP2P", "Identify the topic or theme of StackExchange posts based on the given paragraphs."),
    ("TwentyNewsgroupsClustering", "Identify the topic or theme of the given news articles."),
    ("SciDocsRR", "Given a title of a scientific paper, retrieve the titles of other relevant papers."),
    ("StackOverflowDupQuestions", "Retrieve duplicate questions from StackOverflow forum."),
];

/// Task name → instruction text, seeded with the built-in training tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionRegistry {
    entries: BTreeMap<String, TaskInstruction>,
}

impl Default for InstructionRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Deserialize)]
struct OverrideRow {
    task: String,
    instruction: String,
    #[serde(default)]
    retrieval: Option<bool>,
}

impl InstructionRegistry {
    pub fn builtin() -> Self {
        let mut entries = BTreeMap::new();
        for (kind, table) in [
            (TaskKind::Retrieval, RETRIEVAL_TASKS),
            (TaskKind::Other, OTHER_TASKS),
        ] {
            for (task, instruction) in table {
                entries.insert(
                    task.to_string(),
                    TaskInstruction {
                        instruction: instruction.to_string(),
                        kind,
                    },
                );
            }
        }
        Self { entries }
    }

    /// Adds or replaces an entry.
    pub fn set(&mut self, task: impl Into<String>, instruction: impl Into<String>, kind: TaskKind) {
        self.entries.insert(
            task.into(),
            TaskInstruction {
                instruction: instruction.into(),
                kind,
            },
        );
    }

    /// Merges `{"task", "instruction", "retrieval"?}` lines over the current
    /// entries. An override keeps the task's existing kind unless `retrieval`
    /// is given; new tasks default to non-retrieval.
    pub fn merge_overrides(&mut self, path: &Path) -> Result<usize> {
        let rows: Vec<(usize, OverrideRow)> = read_records(path)?;
        let n = rows.len();
        for (_, row) in rows {
            let kind = match row.retrieval {
                Some(true) => TaskKind::Retrieval,
                Some(false) => TaskKind::Other,
                None => self
                    .entries
                    .get(&row.task)
                    .map_or(TaskKind::Other, |e| e.kind),
            };
            self.set(row.task, row.instruction, kind);
        }
        Ok(n)
    }

    pub fn get(&self, task: &str) -> Result<&TaskInstruction> {
        self.entries.get(task).ok_or_else(|| Error::UnknownTask {
            task: task.to_string(),
            known: self.entries.keys().cloned().collect(),
        })
    }

    pub fn instruction_for(&self, task: &str) -> Result<&str> {
        self.get(task).map(|e| e.instruction.as_str())
    }

    pub fn is_retrieval(&self, task: &str) -> Result<bool> {
        self.get(task).map(|e| e.kind == TaskKind::Retrieval)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const DEFAULT_EOS_MARKER: &str = "</s>";

/// A demonstration (query, passage) pair shown before the target query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub query: String,
    pub passage: String,
}

/// Renders
///
/// ```text
/// Instruct: {instruction}\nQuery: {shot query}\nResponse: {shot passage}
///
/// ...one block per shot...
///
/// Instruct: {instruction}\nQuery: {query}{eos}
/// ```
pub fn format_prompt(instruction: &str, shots: &[Shot], query: &str, eos_marker: &str) -> String {
    let mut out = String::new();
    for shot in shots {
        out.push_str(&format!(
            "Instruct: {instruction}\nQuery: {}\nResponse: {}\n\n",
            shot.query, shot.passage
        ));
    }
    out.push_str(&format!(
        "Instruct: {instruction}\nQuery: {query}{eos_marker}"
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftNegative {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task: String,
    pub instruction: String,
    pub query: String,
    pub positive: String,
    pub positive_soft_score: Option<f64>,
    pub negatives: Vec<SoftNegative>,
    pub prompt: String,
    pub shortfall: bool,
    /// Demonstrations rendered into `prompt`; omitted when zero-shot.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shots: Vec<Shot>,
}

impl TrainingRecord {
    /// Re-renders the prompt from the stored fields.
    pub fn render_prompt(&self, eos_marker: &str) -> String {
        format_prompt(&self.instruction, &self.shots, &self.query, eos_marker)
    }
}

/// Where a pair's positive text comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PositiveRef {
    /// A corpus document; the pair can carry mined negatives.
    Doc(String),
    /// Free text with no corpus identity (converted NLI, classification data).
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSource {
    pub query_id: String,
    pub query: String,
    pub task: String,
    pub positive: PositiveRef,
}

#[derive(Debug, Clone)]
pub struct ForgeSettings {
    pub eos_marker: String,
    pub shots: HashMap<String, Vec<Shot>>,
    pub num_negatives: usize,
}

impl Default for ForgeSettings {
    fn default() -> Self {
        Self {
            eos_marker: DEFAULT_EOS_MARKER.to_string(),
            shots: HashMap::new(),
            num_negatives: 7,
        }
    }
}

fn doc_text<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a str> {
    corpus
        .get(id)
        .map(|d| d.text.as_str())
        .ok_or_else(|| Error::UnknownDocument(id.to_string()))
}

/// Joins pairs with their mined negatives and renders prompts.
///
/// `mined` is keyed by `(query_id, positive_id)`. Retrieval-task pairs must
/// have an entry; other tasks may omit one and get no negatives. Output order
/// follows `pairs`.
pub fn emit_training_records(
    pairs: &[PairSource],
    mined: &HashMap<(String, String), MinedNegatives>,
    corpus: &Corpus,
    registry: &InstructionRegistry,
    settings: &ForgeSettings,
) -> Result<Vec<TrainingRecord>> {
    pairs
        .iter()
        .map(|pair| emit_one(pair, mined, corpus, registry, settings))
        .collect()
}

fn emit_one(
    pair: &PairSource,
    mined: &HashMap<(String, String), MinedNegatives>,
    corpus: &Corpus,
    registry: &InstructionRegistry,
    settings: &ForgeSettings,
) -> Result<TrainingRecord> {
    let entry = registry.get(&pair.task)?;
    let (positive, mined_entry) = match &pair.positive {
        PositiveRef::Doc(id) => (
            doc_text(corpus, id)?.to_string(),
            mined.get(&(pair.query_id.clone(), id.clone())),
        ),
        PositiveRef::Text(t) => (t.clone(), None),
    };
    if entry.kind == TaskKind::Retrieval && mined_entry.is_none() {
        let positive_id = match &pair.positive {
            PositiveRef::Doc(id) => id.clone(),
            PositiveRef::Text(_) => "<text>".to_string(),
        };
        return Err(Error::MissingMined {
            query_id: pair.query_id.clone(),
            positive_id,
        });
    }
    let (negatives, positive_soft_score, shortfall) = match mined_entry {
        Some(m) => {
            if m.negatives.len() > settings.num_negatives {
                return Err(Error::invalid(format!(
                    "query \"{}\" has {} negatives, more than the configured {}",
                    pair.query_id,
                    m.negatives.len(),
                    settings.num_negatives
                )));
            }
            let negs = m
                .negatives
                .iter()
                .map(|n| {
                    Ok(SoftNegative {
                        text: doc_text(corpus, &n.doc_id)?.to_string(),
                        score: n.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (negs, Some(m.positive_score), m.shortfall)
        }
        None => (Vec::new(), None, false),
    };
    let shots = settings.shots.get(&pair.task).cloned().unwrap_or_default();
    let prompt = format_prompt(
        &entry.instruction,
        &shots,
        &pair.query,
        &settings.eos_marker,
    );
    Ok(TrainingRecord {
        task: pair.task.clone(),
        instruction: entry.instruction.clone(),
        query: pair.query.clone(),
        positive,
        positive_soft_score,
        negatives,
        prompt,
        shortfall,
        shots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::mining::{ScoreSource, ScoredDoc};

    fn nli(label: &str) -> NliRecord {
        NliRecord {
            premise: format!("p-{label}"),
            hypothesis: format!("h-{label}"),
            label: label.into(),
        }
    }

    #[test]
    fn nli_conversion() {
        let input = vec![
            nli("entailment"),
            nli("neutral"),
            nli("contradiction"),
            nli("entailment"),
            nli("neutral"),
            nli("contradiction"),
        ];
        let out = convert_nli(&input, 1.0, 0.0).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| !r.sentence_a.contains("neutral")));
        assert_eq!(out[0].similarity, 1.0);
        assert_eq!(out[1].similarity, 0.0);
        assert_eq!(out[0].sentence_a, "p-entailment");

        let err = convert_nli(&[nli("entailment"), nli("maybe")], 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        assert!(convert_nli(&[], 0.2, 0.5).is_err());
    }

    #[test]
    fn registry_lookups() {
        let reg = InstructionRegistry::builtin();
        assert_eq!(
            reg.instruction_for("ArguAna").unwrap(),
            "Given a claim, find documents that refute the claim."
        );
        assert_eq!(
            reg.instruction_for("STS12").unwrap(),
            "Retrieve semantically similar text."
        );
        let err = reg.instruction_for("NoSuchTask").unwrap_err();
        assert!(err.to_string().contains("MSMARCO"));
        assert!(reg.is_retrieval("MSMARCO").unwrap());
        assert!(!reg.is_retrieval("EmotionClassification").unwrap());
        assert_eq!(reg.len(), 33);
    }

    #[test]
    fn registry_overrides() {
        let mut reg = InstructionRegistry::builtin();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(
            f.path(),
            "{\"task\":\"MSMARCO\",\"instruction\":\"Find it.\"}\n{\"task\":\"Custom\",\"instruction\":\"Do.\",\"retrieval\":true}\n",
        )
        .unwrap();
        assert_eq!(reg.merge_overrides(f.path()).unwrap(), 2);
        assert_eq!(reg.instruction_for("MSMARCO").unwrap(), "Find it.");
        assert!(reg.is_retrieval("MSMARCO").unwrap());
        assert!(reg.is_retrieval("Custom").unwrap());
    }

    #[test]
    fn prompt_templates() {
        assert_eq!(
            format_prompt("Do X.", &[], "what?", "</s>"),
            "Instruct: Do X.\nQuery: what?</s>"
        );
        let shot = Shot {
            query: "sq".into(),
            passage: "sp".into(),
        };
        assert_eq!(
            format_prompt("Do X.", &[shot], "what?", "<eos>"),
            "Instruct: Do X.\nQuery: sq\nResponse: sp\n\nInstruct: Do X.\nQuery: what?<eos>"
        );
    }

    fn corpus() -> Corpus {
        Corpus::new(
            (0..9)
                .map(|i| Document {
                    id: format!("d{i}"),
                    title: None,
                    text: format!("text {i}"),
                })
                .collect(),
        )
        .unwrap()
    }

    fn mined(n: usize) -> MinedNegatives {
        MinedNegatives {
            query_id: "q1".into(),
            positive_id: "d0".into(),
            positive_score: 0.05,
            threshold: 0.0475,
            negatives: (1..=n)
                .map(|i| ScoredDoc {
                    doc_id: format!("d{i}"),
                    score: 0.04 - i as f64 * 0.001,
                })
                .collect(),
            shortfall: false,
            seed: 42,
            score_source: ScoreSource::Fused,
        }
    }

    #[test]
    fn emits_retrieval_and_classification_records() {
        let reg = InstructionRegistry::builtin();
        let settings = ForgeSettings::default();
        let mut map = HashMap::new();
        map.insert(("q1".to_string(), "d0".to_string()), mined(7));
        let pairs = vec![
            PairSource {
                query_id: "q1".into(),
                query: "find".into(),
                task: "MSMARCO".into(),
                positive: PositiveRef::Doc("d0".into()),
            },
            PairSource {
                query_id: "c1".into(),
                query: "great movie".into(),
                task: "ImdbClassification".into(),
                positive: PositiveRef::Text("positive".into()),
            },
        ];
        let recs = emit_training_records(&pairs, &map, &corpus(), &reg, &settings).unwrap();
        assert_eq!(recs[0].negatives.len(), 7);
        assert_eq!(recs[0].negatives[0].text, "text 1");
        assert_eq!(recs[0].positive, "text 0");
        assert_eq!(recs[0].positive_soft_score, Some(0.05));
        assert!(recs[1].negatives.is_empty());
        for r in &recs {
            assert!(r.prompt.ends_with("</s>"));
            assert_eq!(r.render_prompt("</s>"), r.prompt);
        }
    }

    #[test]
    fn missing_references_are_errors() {
        let reg = InstructionRegistry::builtin();
        let settings = ForgeSettings::default();
        let pair = PairSource {
            query_id: "q1".into(),
            query: "find".into(),
            task: "MSMARCO".into(),
            positive: PositiveRef::Doc("d0".into()),
        };
        let err = emit_training_records(
            std::slice::from_ref(&pair),
            &HashMap::new(),
            &corpus(),
            &reg,
            &settings,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingMined { .. }));

        let mut m = mined(2);
        m.negatives[1].doc_id = "ghost".into();
        let mut map = HashMap::new();
        map.insert(("q1".to_string(), "d0".to_string()), m);
        let err = emit_training_records(&[pair], &map, &corpus(), &reg, &settings).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }
}
