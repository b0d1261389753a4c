//! `marginmine` command-line front end.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, config, or input
//! records), 2 runtime failure (I/O, scoring service, or a pipeline stage).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use marginmine::config::PipelineConfig;
use marginmine::corpus::{dedup, expand_pairs, load_corpus, load_pairs, load_queries};
use marginmine::dense::load_vectors;
use marginmine::eval::{build_report, load_eval};
use marginmine::forge::{
    attach_soft_scores, convert_nli, format_prompt, load_nli, InstructionRegistry,
};
use marginmine::fusion::{build_teacher_scores, save_teacher_scores};
use marginmine::jsonl::{read_records, write_records};
use marginmine::lexical::InvertedIndex;
use marginmine::loss::{
    grad_check, infonce_loss, soft_distill_loss, Blended, InfoNce, SimBatch, SimObjective,
    TeacherDistribution,
};
use marginmine::pipeline::{load_shots, reranker_list, run_mine, RunOverrides};
use marginmine::ranking::{load_runs, save_runs, Channel, QueryRun, RankedList};
use marginmine::rerank::{load_scores, Gateway, PairScore, ScoreSet, TextPair};
use marginmine::Error;

#[derive(Parser)]
#[command(
    name = "marginmine",
    version,
    about = "Hard-negative mining and embedding training-data tooling"
)]
struct Cli {
    /// Pipeline configuration (TOML). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides mining.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Abort when a candidate has no reranker score.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save a BM25 index; optionally search it for a query file.
    IndexLexical(IndexLexicalArgs),
    /// Exact inner-product search of query vectors against document vectors.
    IndexDense(IndexDenseArgs),
    /// Score candidate pairs with a reranker service into a score file.
    Rerank(RerankArgs),
    /// Fuse lexical, semantic, and reranker rankings into teacher scores.
    Fuse(FuseArgs),
    /// Run the full mining pipeline described by --config.
    Mine(MineArgs),
    /// Convert NLI triples into similarity pairs.
    ConvertNli(ConvertNliArgs),
    /// Expand multi-positive pairs and drop duplicates.
    Dedup(DedupArgs),
    /// Render instruction prompts for a query file.
    FormatPrompts(FormatPromptsArgs),
    /// Evaluate the training objective on a batch of similarities.
    Loss(LossArgs),
    /// Compare analytic and finite-difference gradients on a batch.
    GradCheck(GradCheckArgs),
    /// Aggregate benchmark scores into category means and a Borda ranking.
    Eval(EvalArgs),
}

#[derive(Args)]
struct IndexLexicalArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Where to write the index.
    #[arg(long)]
    output: PathBuf,
    /// Queries to search; requires --runs.
    #[arg(long, requires = "runs")]
    queries: Option<PathBuf>,
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Depth of each ranked list (default: candidate_depth).
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct IndexDenseArgs {
    #[arg(long)]
    doc_vectors: Option<PathBuf>,
    #[arg(long)]
    query_vectors: Option<PathBuf>,
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Run files whose candidates are scored (their union per query).
    #[arg(long = "runs", required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    lexical: PathBuf,
    #[arg(long)]
    semantic: PathBuf,
    /// Reranker score file (default: paths.reranker_scores).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// RRF constant (default: rrf_k).
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ConvertNliArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    high: Option<f64>,
    #[arg(long)]
    low: Option<f64>,
    /// Reranker service for soft similarity scores.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct FormatPromptsArgs {
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ObjectiveArgs {
    /// JSONL batch: {"s_pos", "s_neg", "teacher"?, "s_cross"?} per query.
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tau_teacher: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Add other queries' positives (from s_cross) as negatives.
    #[arg(long)]
    in_batch: bool,
}

#[derive(Args)]
struct LossArgs {
    #[command(flatten)]
    objective: ObjectiveArgs,
    /// Also report the maximum relative finite-difference error.
    #[arg(long)]
    grad_check: bool,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    objective: ObjectiveArgs,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Fail when the maximum relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    /// JSON object of category → weight for the weighted mean.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.mining.seed = seed;
    }
    if cli.strict {
        cfg.strict = true;
    }
    let problems = cfg.range_problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems).into());
    }
    Ok(cfg)
}

fn pick(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| usage(format!("--{name} is required (or set it under [paths])")))
}

fn write_json_line<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::IndexLexical(a) => index_lexical(&cfg, a),
        Command::IndexDense(a) => index_dense(&cfg, a),
        Command::Rerank(a) => rerank(&cfg, a),
        Command::Fuse(a) => fuse(&cfg, a),
        Command::Mine(a) => mine(&cli, &cfg, a),
        Command::ConvertNli(a) => convert(&cfg, a),
        Command::Dedup(a) => dedup_pairs(a),
        Command::FormatPrompts(a) => format_prompts(&cfg, a),
        Command::Loss(a) => loss(&cfg, a),
        Command::GradCheck(a) => grad_check_cmd(&cfg, a),
        Command::Eval(a) => eval(a),
    }
}

fn index_lexical(cfg: &PipelineConfig, a: &IndexLexicalArgs) -> Result<()> {
    let corpus = load_corpus(&pick(&a.corpus, &cfg.paths.corpus, "corpus")?)?;
    let index = InvertedIndex::build(corpus.documents(), cfg.bm25)?;
    index.save(&a.output)?;
    eprintln!(
        "indexed {} documents, {} terms",
        index.doc_count(),
        index.term_count()
    );
    if let (Some(queries), Some(runs)) = (&a.queries, &a.runs) {
        let top = a.top.unwrap_or(cfg.candidate_depth);
        let mut out = Vec::new();
        for q in load_queries(queries)? {
            let list = index.search(&cfg.bm25, &q.text, top)?;
            out.push(QueryRun {
                query_id: q.id,
                list,
            });
        }
        save_runs(runs, &out)?;
    }
    Ok(())
}

fn index_dense(cfg: &PipelineConfig, a: &IndexDenseArgs) -> Result<()> {
    let docs = load_vectors(&pick(
        &a.doc_vectors,
        &cfg.paths.doc_vectors,
        "doc-vectors",
    )?)?;
    let queries = load_vectors(&pick(
        &a.query_vectors,
        &cfg.paths.query_vectors,
        "query-vectors",
    )?)?;
    let top = a.top.unwrap_or(cfg.candidate_depth);
    let out = queries
        .iter()
        .map(|(id, v)| {
            Ok(QueryRun {
                query_id: id.to_string(),
                list: docs.search(v, top)?,
            })
        })
        .collect::<marginmine::Result<Vec<_>>>()?;
    save_runs(&a.runs, &out)?;
    Ok(())
}

/// Per-query union of candidate ids across run files of any channel.
fn candidate_union(paths: &[PathBuf]) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut union: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for path in paths {
        let rows: Vec<(usize, QueryRun)> = read_records(path)?;
        for (_, run) in rows {
            union
                .entry(run.query_id)
                .or_default()
                .extend(run.list.ids().map(str::to_string));
        }
    }
    Ok(union)
}

fn rerank(cfg: &PipelineConfig, a: &RerankArgs) -> Result<()> {
    let corpus = load_corpus(&pick(&a.corpus, &cfg.paths.corpus, "corpus")?)?;
    let queries: BTreeMap<String, String> =
        load_queries(&pick(&a.queries, &cfg.paths.queries, "queries")?)?
            .into_iter()
            .map(|q| (q.id, q.text))
            .collect();
    let endpoint = a
        .endpoint
        .clone()
        .or_else(|| cfg.paths.reranker_endpoint.clone())
        .ok_or_else(|| usage("--endpoint is required (or set paths.reranker_endpoint)"))?;
    let cache = a.cache.clone().or_else(|| cfg.paths.reranker_cache.clone());

    let mut keys = Vec::new();
    let mut pairs = Vec::new();
    for (qid, docs) in candidate_union(&a.runs)? {
        let qtext = queries
            .get(&qid)
            .ok_or_else(|| usage(format!("run references unknown query \"{qid}\"")))?;
        for did in docs {
            let doc = corpus
                .get(&did)
                .ok_or_else(|| Error::UnknownDocument(did.clone()))?;
            pairs.push(TextPair::new(qtext.clone(), doc.text.clone()));
            keys.push((qid.clone(), did));
        }
    }

    let gateway = Gateway::http(endpoint);
    if let Some(c) = cache.as_deref().filter(|p| p.is_file()) {
        gateway.load_cache(c)?;
    }
    let scores = gateway.request_scores(&pairs)?;
    if let Some(c) = &cache {
        gateway.save_cache(c)?;
    }
    let mut set = ScoreSet::default();
    for ((query_id, doc_id), score) in keys.into_iter().zip(scores) {
        set.insert(PairScore {
            query_id,
            doc_id,
            score,
        })?;
    }
    set.save(&a.output)?;
    eprintln!(
        "scored {} pairs ({} upstream calls)",
        set.len(),
        gateway.upstream_calls()
    );
    Ok(())
}

fn fuse(cfg: &PipelineConfig, a: &FuseArgs) -> Result<()> {
    let k = a.k.unwrap_or(cfg.rrf_k);
    let lexical = load_runs(&a.lexical, Channel::Lexical)?;
    let semantic = load_runs(&a.semantic, Channel::Semantic)?;
    let scores = load_scores(&pick(&a.scores, &cfg.paths.reranker_scores, "scores")?)?;
    let qids: BTreeSet<&String> = lexical.keys().chain(semantic.keys()).collect();
    let empty_lex = RankedList::from_ordered(Channel::Lexical, Vec::new())?;
    let empty_sem = RankedList::from_ordered(Channel::Semantic, Vec::new())?;
    let mut sets = Vec::with_capacity(qids.len());
    for qid in qids {
        let lex = lexical.get(qid).unwrap_or(&empty_lex);
        let sem = semantic.get(qid).unwrap_or(&empty_sem);
        let pool: BTreeSet<&str> = lex.ids().chain(sem.ids()).collect();
        let reranked = reranker_list(
            qid,
            pool.into_iter()
                .map(|d| (d.to_string(), scores.score(qid, d))),
            cfg.strict,
        )?;
        sets.push(build_teacher_scores(qid, lex, sem, &reranked, k)?);
    }
    save_teacher_scores(&a.output, &sets)?;
    Ok(())
}

fn mine(cli: &Cli, cfg: &PipelineConfig, a: &MineArgs) -> Result<()> {
    if cli.config.is_none() {
        return Err(usage("mine requires --config"));
    }
    let overrides = RunOverrides {
        seed: cli.seed,
        strict: cli.strict.then_some(true),
        workers: a.workers,
    };
    let manifest = run_mine(cfg, &overrides)?;
    eprintln!(
        "mined {} queries into {} records ({} with shortfall); config {}",
        manifest.queries, manifest.records, manifest.shortfalls, manifest.config_hash
    );
    Ok(())
}

fn convert(cfg: &PipelineConfig, a: &ConvertNliArgs) -> Result<()> {
    let high = a.high.unwrap_or(cfg.nli.high);
    let low = a.low.unwrap_or(cfg.nli.low);
    let mut records = convert_nli(&load_nli(&a.input)?, high, low)?;
    if let Some(endpoint) = a
        .endpoint
        .clone()
        .or_else(|| cfg.paths.reranker_endpoint.clone())
    {
        attach_soft_scores(&mut records, &Gateway::http(endpoint))?;
    }
    write_records(&a.output, &records)?;
    eprintln!("wrote {} similarity pairs", records.len());
    Ok(())
}

fn dedup_pairs(a: &DedupArgs) -> Result<()> {
    let expanded = expand_pairs(&load_pairs(&a.input)?);
    let kept = dedup(&expanded);
    write_records(&a.output, &kept)?;
    eprintln!(
        "{} expanded pairs, {} after dedup",
        expanded.len(),
        kept.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct PromptLine<'a> {
    id: &'a str,
    task: &'a str,
    prompt: String,
}

fn format_prompts(cfg: &PipelineConfig, a: &FormatPromptsArgs) -> Result<()> {
    let queries = load_queries(&pick(&a.queries, &cfg.paths.queries, "queries")?)?;
    let mut registry = InstructionRegistry::builtin();
    if let Some(p) = &cfg.prompt.registry_overrides {
        registry.merge_overrides(p)?;
    }
    let shots = match &cfg.prompt.shots {
        Some(p) => load_shots(p)?,
        None => Default::default(),
    };
    let lines = queries
        .iter()
        .map(|q| {
            let instruction = registry.instruction_for(&q.task)?;
            let task_shots = shots.get(&q.task).map(Vec::as_slice).unwrap_or(&[]);
            Ok(PromptLine {
                id: &q.id,
                task: &q.task,
                prompt: format_prompt(instruction, task_shots, &q.text, &cfg.prompt.eos_marker),
            })
        })
        .collect::<marginmine::Result<Vec<_>>>()?;
    write_records(&a.output, &lines)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchLine {
    s_pos: f64,
    s_neg: Vec<f64>,
    #[serde(default)]
    teacher: Option<Vec<f64>>,
    #[serde(default)]
    s_cross: Option<Vec<f64>>,
}

struct Objective {
    batch: SimBatch,
    teacher: Option<TeacherDistribution>,
    lambda: f64,
}

impl Objective {
    fn load(cfg: &PipelineConfig, a: &ObjectiveArgs) -> Result<Self> {
        let rows: Vec<(usize, BatchLine)> = read_records(&a.batch)?;
        if rows.is_empty() {
            return Err(usage(format!("{} holds no batch lines", a.batch.display())));
        }
        let tau = a.tau.unwrap_or(cfg.loss.tau);
        let tau_teacher = a.tau_teacher.or(cfg.loss.tau_teacher).unwrap_or(tau);
        let with_teacher = rows.iter().filter(|(_, r)| r.teacher.is_some()).count();
        if with_teacher != 0 && with_teacher != rows.len() {
            return Err(usage(
                "either every batch line carries \"teacher\" or none does",
            ));
        }
        let lambda = match (a.lambda, with_teacher) {
            (Some(l), 0) if l != 1.0 => {
                return Err(usage(
                    "--lambda below 1 needs \"teacher\" scores in the batch",
                ))
            }
            (_, 0) => 1.0,
            (l, _) => l.unwrap_or(cfg.loss.lambda),
        };

        let mut pos = Vec::with_capacity(rows.len());
        let mut neg = Vec::with_capacity(rows.len());
        let mut cross = Vec::new();
        let mut teacher = Vec::new();
        for (line, r) in rows {
            pos.push(r.s_pos);
            neg.push(r.s_neg);
            if let Some(t) = r.teacher {
                teacher.push(t);
            }
            if a.in_batch {
                cross.push(
                    r.s_cross.ok_or_else(|| {
                        usage(format!("line {line}: --in-batch needs \"s_cross\""))
                    })?,
                );
            }
        }
        let mut batch = SimBatch::new(pos, neg, tau);
        if a.in_batch {
            batch.cross = Some(cross);
            batch.in_batch = true;
        }
        batch.validate()?;
        Ok(Self {
            batch,
            teacher: (with_teacher > 0).then_some(TeacherDistribution {
                scores: teacher,
                tau: tau_teacher,
            }),
            lambda,
        })
    }

    fn objective(&self) -> Box<dyn SimObjective> {
        match &self.teacher {
            Some(t) => Box::new(Blended {
                lambda: self.lambda,
                teacher: t.clone(),
            }),
            None => Box::new(InfoNce),
        }
    }
}

#[derive(Serialize)]
struct LossReport {
    loss: f64,
    infonce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    distill: Option<f64>,
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_rel_error: Option<f64>,
}

fn loss(cfg: &PipelineConfig, a: &LossArgs) -> Result<()> {
    let o = Objective::load(cfg, &a.objective)?;
    let obj = o.objective();
    let report = LossReport {
        loss: obj.value(&o.batch)?,
        infonce: infonce_loss(&o.batch)?,
        distill: o
            .teacher
            .as_ref()
            .map(|t| soft_distill_loss(&o.batch, t))
            .transpose()?,
        lambda: o.lambda,
        max_rel_error: if a.grad_check {
            Some(grad_check(obj.as_ref(), &o.batch, a.eps)?.max_rel_error)
        } else {
            None
        },
    };
    write_json_line(&report)
}

#[derive(Serialize)]
struct GradCheckLine {
    max_rel_error: f64,
    max_abs_error: f64,
    worst_coord: usize,
    coords: usize,
    tolerance: f64,
    pass: bool,
}

fn grad_check_cmd(cfg: &PipelineConfig, a: &GradCheckArgs) -> Result<()> {
    let o = Objective::load(cfg, &a.objective)?;
    let report = grad_check(o.objective().as_ref(), &o.batch, a.eps)?;
    let pass = report.max_rel_error < a.tolerance;
    write_json_line(&GradCheckLine {
        max_rel_error: report.max_rel_error,
        max_abs_error: report.max_abs_error,
        worst_coord: report.worst_coord,
        coords: report.analytic.len(),
        tolerance: a.tolerance,
        pass,
    })?;
    if pass {
        Ok(())
    } else {
        Err(anyhow::anyhow!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            report.max_rel_error,
            a.tolerance
        ))
    }
}

fn load_weights(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let matrix = load_eval(&a.input)?;
    let weights = a.weights.as_deref().map(load_weights).transpose()?;
    let report = build_report(&matrix, weights.as_ref())?;
    match a.format {
        Format::Text => print!("{}", report.to_text()),
        Format::Json => write_json_line(&report)?,
    }
    Ok(())
}
