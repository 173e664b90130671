//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anchorchain_core::agent::{CachedBackend, RemoteBackend, API_KEY_ENV};
use anchorchain_core::corpus::{load_qa, CHUNKS_FILE};
use anchorchain_core::experiment::{
    evaluate_trace_file, render_report, AblationSpec, AblationTable, Workbench, DEFAULT_STEPS, PER_QUERY_FILE,
    REPORT_FILE, TRACE_FILE,
};
use anchorchain_core::metrics::{ExactMatchJudge, Judge, MetricReport, TemplateJudge};
use anchorchain_core::pipeline::BatchOptions;
use anchorchain_core::retrieval::CompletionReranker;
use anchorchain_core::synthetic::{self, load_truth, ChainSpec, OracleBackend, SyntheticTruth};
use anchorchain_core::{Backend, CorpusStore, Pipeline, PromptTemplates, QaRecord, Retriever, Variant};
use clap::{Args, Subcommand};
use serde::Serialize;

use crate::config::{BackendKind, FileConfig, JudgeKind, Overrides, RerankerKind, ShapeOverrides};
use crate::error::Failure;
use crate::manifest::{absolute, input_file, write_atomic, InputFile, RunCounts, RunManifest, MANIFEST_FILE};

pub const INGEST_FILE: &str = "ingest.json";
const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a corpus file and persist the chunk store.
    Ingest(IngestArgs),
    /// Run one pipeline configuration over a QA dataset.
    Run(RunArgs),
    /// Score a trace file.
    Eval(EvalArgs),
    /// Run and score a grid of variants and step counts.
    Ablate(AblateArgs),
    /// Render a report or ablation table.
    Report(ReportArgs),
    /// Generate a synthetic multi-hop corpus and QA set.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Line-delimited documents with doc_id, title and text.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for the chunk store.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_chars: Option<usize>,
    #[arg(long)]
    pub overlap_chars: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// QA dataset. Taken from the manifest when --manifest is given.
    #[arg(long, required_unless_present = "manifest")]
    pub qa: Option<PathBuf>,
    /// Chunk store directory written by `ingest`.
    #[arg(long, required_unless_present = "manifest")]
    pub index: Option<PathBuf>,
    /// Output directory. Defaults to the manifest's directory on re-execution.
    #[arg(long, required_unless_present = "manifest")]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-execute the run recorded in this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ShapeOverrides,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Output directory. Defaults to the trace file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
    #[arg(long)]
    pub judge_model: Option<String>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_values_t = AblationSpec::default().variants)]
    pub variants: Vec<Variant>,
    /// Comma-separated step counts; each sets both the sub-query count and the hop budget.
    #[arg(long = "steps", value_delimiter = ',', default_values_t = DEFAULT_STEPS.to_vec())]
    pub steps_list: Vec<usize>,
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
    #[arg(long)]
    pub judge_model: Option<String>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report.json or table.json file, or a directory holding one.
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ChainSpec::default().n_queries)]
    pub n_queries: usize,
    /// Comma-separated chain lengths, assigned round-robin.
    #[arg(long, value_delimiter = ',', default_values_t = ChainSpec::default().hops_per_query)]
    pub hops: Vec<usize>,
    #[arg(long, default_value_t = ChainSpec::default().distractors_per_gold)]
    pub distractors: usize,
    #[arg(long, default_value_t = ChainSpec::default().near_miss_rate)]
    pub near_miss: f64,
    #[arg(long, default_value_t = ChainSpec::default().seed)]
    pub seed: u64,
}

pub fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    }
}

#[derive(Debug, Serialize)]
struct IngestRecord {
    source: InputFile,
    chunking: anchorchain_core::ChunkingConfig,
    stats: anchorchain_core::corpus::CorpusStats,
    digest: String,
}

fn ingest(a: IngestArgs) -> Result<(), Failure> {
    let mut cfg = FileConfig::load(a.config.as_deref())?;
    if let Some(n) = a.max_chars {
        cfg.chunking.max_chars = n;
    }
    if let Some(n) = a.overlap_chars {
        cfg.chunking.overlap_chars = n;
    }
    cfg.chunking.validate()?;
    let store = Arc::new(CorpusStore::ingest(&a.corpus, &cfg.chunking)?);
    // Building the index up front surfaces empty or unindexable corpora here.
    Retriever::new(store.clone())?;
    store.save(&a.out)?;
    let record = IngestRecord {
        source: input_file(&a.corpus)?,
        chunking: cfg.chunking,
        stats: store.stats(),
        digest: store.digest(),
    };
    let mut text = serde_json::to_string_pretty(&record).expect("ingest record serializes");
    text.push('\n');
    write_atomic(&a.out.join(INGEST_FILE), text.as_bytes())?;
    println!(
        "ingested {} documents into {} chunks (mean {:.1} chars)",
        record.stats.n_documents, record.stats.n_chunks, record.stats.mean_chunk_chars
    );
    println!("index digest {}", record.digest);
    Ok(())
}

/// Everything a run or ablation needs, loaded and cross-checked.
struct Loaded {
    records: Vec<QaRecord>,
    store: Arc<CorpusStore>,
    truth: Option<(InputFile, Vec<SyntheticTruth>)>,
    prompts: PromptTemplates,
    qa_input: InputFile,
    index_input: InputFile,
}

fn load_inputs(cfg: &FileConfig, qa: &Path, index: &Path, need_truth: bool) -> Result<Loaded, Failure> {
    let records = load_qa(qa).map_err(|e| Failure::Data(format!("{}: {e}", qa.display())))?;
    let store =
        CorpusStore::load(index).map_err(|e| Failure::Data(format!("{}: {e}", index.join(CHUNKS_FILE).display())))?;
    let truth = if need_truth {
        let path = truth_path(cfg.backend.truth.as_deref(), qa)?;
        let truth = load_truth(&path)?;
        Some((input_file(&path)?, truth))
    } else {
        None
    };
    let prompts = match &cfg.backend.prompts_dir {
        Some(dir) => {
            PromptTemplates::from_dir(dir, &cfg.backend.prompts_version).map_err(|e| Failure::Data(e.to_string()))?
        }
        None => PromptTemplates::builtin(),
    };
    Ok(Loaded {
        qa_input: input_file(qa)?,
        index_input: InputFile {
            path: absolute(index)?,
            digest: store.digest(),
        },
        records,
        store: Arc::new(store),
        truth,
        prompts,
    })
}

/// The oracle needs the generator's truth file; by default it sits next to
/// the QA file.
fn truth_path(explicit: Option<&Path>, qa: &Path) -> Result<PathBuf, Failure> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let sibling = qa.parent().unwrap_or(Path::new(".")).join(TRUTH_FILE);
    if sibling.is_file() {
        Ok(sibling)
    } else {
        Err(Failure::Usage(format!(
            "the oracle needs a truth file; pass --truth (looked for {})",
            sibling.display()
        )))
    }
}

fn remote_backend(cfg: &FileConfig, cache_dir: Option<&Path>) -> Result<Arc<dyn Backend>, Failure> {
    let remote = cfg.remote.clone().with_env_key();
    if remote.api_key.is_none() {
        return Err(Failure::Backend(format!(
            "the remote backend needs {API_KEY_ENV} to be set"
        )));
    }
    let inner = RemoteBackend::new(remote);
    Ok(match cache_dir {
        Some(dir) => Arc::new(CachedBackend::on_disk(inner, dir)?),
        None => Arc::new(CachedBackend::in_memory(inner)),
    })
}

fn agent_backend(cfg: &FileConfig, loaded: &Loaded, cache_dir: Option<&Path>) -> Result<Arc<dyn Backend>, Failure> {
    match cfg.backend.kind {
        BackendKind::Oracle => {
            let (_, truth) = loaded.truth.as_ref().expect("truth loaded for the oracle backend");
            Ok(Arc::new(CachedBackend::in_memory(OracleBackend::new(
                truth,
                &loaded.records,
            ))))
        }
        BackendKind::Remote => remote_backend(cfg, cache_dir),
    }
}

fn judge_for(cfg: &FileConfig, loaded: &Loaded, cache_dir: Option<&Path>) -> Result<Box<dyn Judge>, Failure> {
    let model = cfg
        .backend
        .judge_model_id
        .clone()
        .unwrap_or_else(|| cfg.pipeline.model_id.clone());
    Ok(match cfg.backend.judge {
        JudgeKind::Exact => Box::new(ExactMatchJudge),
        JudgeKind::Oracle => {
            let (_, truth) = loaded.truth.as_ref().expect("truth loaded for the oracle judge");
            let backend: Arc<dyn Backend> = Arc::new(OracleBackend::new(truth, &loaded.records));
            Box::new(TemplateJudge::new(backend, loaded.prompts.clone(), model))
        }
        JudgeKind::Remote => Box::new(TemplateJudge::new(
            remote_backend(cfg, cache_dir)?,
            loaded.prompts.clone(),
            model,
        )),
    })
}

fn retriever_for(cfg: &FileConfig, loaded: &Loaded, backend: &Arc<dyn Backend>) -> Result<Arc<Retriever>, Failure> {
    let retriever = Retriever::new(loaded.store.clone())?;
    Ok(Arc::new(match cfg.backend.reranker {
        RerankerKind::Coverage => retriever,
        RerankerKind::Completion => retriever.with_reranker(Arc::new(CompletionReranker::new(
            backend.clone(),
            loaded.prompts.clone(),
            cfg.pipeline.controller_model_id.clone(),
        ))),
    }))
}

fn needs_truth(cfg: &FileConfig, judging: bool) -> bool {
    cfg.backend.kind == BackendKind::Oracle || (judging && cfg.backend.judge == JudgeKind::Oracle)
}

fn check_digest(what: &str, recorded: &InputFile, actual: &InputFile) -> Result<(), Failure> {
    if recorded.digest != actual.digest {
        return Err(Failure::Data(format!(
            "{what} {} changed since the recorded run (digest {} != {})",
            actual.path.display(),
            actual.digest,
            recorded.digest
        )));
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let prior = a.manifest.as_deref().map(RunManifest::load).transpose()?;
    let (mut cfg, qa, index, out) = match &prior {
        Some(m) => {
            if m.command != "run" {
                return Err(Failure::Usage(format!(
                    "manifest records a {:?} command, not a run",
                    m.command
                )));
            }
            let missing = || Failure::Data("manifest lacks its qa or index input".into());
            let mut cfg = m.config.clone();
            if let Some(t) = &m.inputs.truth {
                cfg.backend.truth = Some(t.path.clone());
            }
            let manifest_dir = a.manifest.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
            (
                cfg,
                a.qa.clone()
                    .unwrap_or(m.inputs.qa.as_ref().ok_or_else(missing)?.path.clone()),
                a.index
                    .clone()
                    .unwrap_or(m.inputs.index.as_ref().ok_or_else(missing)?.path.clone()),
                a.out.clone().unwrap_or_else(|| manifest_dir.to_path_buf()),
            )
        }
        None => (
            FileConfig::load(a.config.as_deref())?,
            a.qa.clone().expect("clap requires --qa"),
            a.index.clone().expect("clap requires --index"),
            a.out.clone().expect("clap requires --out"),
        ),
    };
    a.shape.apply(&mut cfg);
    a.overrides.apply(&mut cfg);
    cfg.validate()?;

    let loaded = load_inputs(&cfg, &qa, &index, needs_truth(&cfg, false))?;
    if let Some(m) = &prior {
        if let Some(r) = &m.inputs.qa {
            check_digest("QA file", r, &loaded.qa_input)?;
        }
        if let Some(r) = &m.inputs.index {
            check_digest("index", r, &loaded.index_input)?;
        }
        if let (Some(r), Some((t, _))) = (&m.inputs.truth, &loaded.truth) {
            check_digest("truth file", r, t)?;
        }
    }
    let backend = agent_backend(&cfg, &loaded, cfg.backend.cache_dir.as_deref())?;
    let retriever = retriever_for(&cfg, &loaded, &backend)?;
    let pipeline = Pipeline::new(retriever, loaded.prompts.clone(), cfg.pipeline.clone())?;

    let mut manifest = RunManifest::begin("run", cfg.clone(), backend.id(), loaded.prompts.version().to_string());
    manifest.inputs.qa = Some(loaded.qa_input.clone());
    manifest.inputs.index = Some(loaded.index_input.clone());
    manifest.inputs.truth = loaded.truth.as_ref().map(|(f, _)| f.clone());

    let trace_path = out.join(TRACE_FILE);
    let opts = BatchOptions {
        parallelism: cfg.run.parallelism,
        resume: cfg.run.resume,
    };
    let summary = pipeline.run_batch(&loaded.records, backend.as_ref(), &trace_path, opts)?;
    // Workers append in completion order; rewrite in dataset order so the
    // file is identical however the batch was scheduled.
    let mut body = String::new();
    for t in &summary.traces {
        body.push_str(&t.to_json_line());
        body.push('\n');
    }
    write_atomic(&trace_path, body.as_bytes())?;

    manifest.artifact("traces", TRACE_FILE);
    manifest.counts = Some(RunCounts {
        n_queries: summary.traces.len(),
        computed: summary.computed,
        resumed: summary.resumed,
        errored: summary.errored,
    });
    let manifest_path = manifest.finish(&out)?;
    println!(
        "{} traces ({} computed, {} resumed, {} errored) -> {}",
        summary.traces.len(),
        summary.computed,
        summary.resumed,
        summary.errored,
        trace_path.display()
    );
    println!("manifest {}", manifest_path.display());
    if summary.errored > 0 {
        return Err(Failure::Backend(format!(
            "{} of {} queries ended in an error fallback; see {}",
            summary.errored,
            summary.traces.len(),
            trace_path.display()
        )));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = FileConfig::load(a.config.as_deref())?;
    if let Some(j) = a.judge {
        cfg.backend.judge = j;
    }
    if let Some(m) = &a.judge_model {
        cfg.backend.judge_model_id = Some(m.clone());
    }
    if let Some(t) = &a.truth {
        cfg.backend.truth = Some(t.clone());
    }
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.traces.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let loaded = load_inputs(&cfg, &a.qa, &a.index, cfg.backend.judge == JudgeKind::Oracle)?;
    let judge = judge_for(&cfg, &loaded, cfg.backend.cache_dir.as_deref())?;
    fs::create_dir_all(&out).map_err(|e| Failure::io(&out, e))?;
    let report = evaluate_trace_file(&a.traces, &loaded.records, &loaded.store, judge.as_ref(), &out)?;

    // Scoring a run directory extends that run's manifest; elsewhere the
    // evaluation gets a manifest of its own.
    let existing = out.join(MANIFEST_FILE);
    let mut manifest = match RunManifest::load(&existing) {
        Ok(mut m) if m.command == "run" => {
            m.config.backend.judge = cfg.backend.judge;
            m.config.backend.judge_model_id = cfg.backend.judge_model_id.clone();
            m
        }
        _ => {
            let mut m = RunManifest::begin(
                "eval",
                cfg.clone(),
                judge_id(&cfg),
                loaded.prompts.version().to_string(),
            );
            m.inputs.qa = Some(loaded.qa_input.clone());
            m.inputs.index = Some(loaded.index_input.clone());
            m
        }
    };
    manifest.inputs.traces = Some(input_file(&a.traces)?);
    if let Some((t, _)) = &loaded.truth {
        manifest.inputs.truth.get_or_insert_with(|| t.clone());
    }
    manifest.artifact("per_query", PER_QUERY_FILE);
    manifest.artifact("report", REPORT_FILE);
    manifest.finish(&out)?;
    print!("{}", render_report(&report));
    Ok(())
}

fn judge_id(cfg: &FileConfig) -> String {
    match cfg.backend.judge {
        JudgeKind::Exact => "exact".into(),
        JudgeKind::Oracle => "oracle".into(),
        JudgeKind::Remote => format!("remote:{}", cfg.remote.base_url),
    }
}

fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let mut cfg = FileConfig::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    if let Some(j) = a.judge {
        cfg.backend.judge = j;
    }
    if let Some(m) = &a.judge_model {
        cfg.backend.judge_model_id = Some(m.clone());
    }
    cfg.validate()?;
    let spec = AblationSpec {
        variants: a.variants.clone(),
        steps: a.steps_list.clone(),
    };
    if spec.variants.is_empty() || spec.steps.is_empty() || spec.steps.contains(&0) {
        return Err(Failure::Usage(
            "ablation needs at least one variant and positive step counts".into(),
        ));
    }
    // Every cell shares one cache so repeated prompts are paid for once.
    let cache_dir = cfg.backend.cache_dir.clone().unwrap_or_else(|| a.out.join("cache"));
    let loaded = load_inputs(&cfg, &a.qa, &a.index, needs_truth(&cfg, true))?;
    let backend = agent_backend(&cfg, &loaded, Some(&cache_dir))?;
    let judge = judge_for(&cfg, &loaded, Some(&cache_dir))?;
    let retriever = retriever_for(&cfg, &loaded, &backend)?;
    let bench = Workbench {
        store: loaded.store.clone(),
        retriever,
        prompts: loaded.prompts.clone(),
        backend: backend.as_ref(),
        judge: judge.as_ref(),
        records: &loaded.records,
        batch: BatchOptions {
            parallelism: cfg.run.parallelism,
            resume: cfg.run.resume,
        },
    };

    let mut manifest = RunManifest::begin(
        "ablate",
        cfg.clone(),
        backend.id(),
        loaded.prompts.version().to_string(),
    );
    manifest.ablation = Some(spec.clone());
    manifest.inputs.qa = Some(loaded.qa_input.clone());
    manifest.inputs.index = Some(loaded.index_input.clone());
    manifest.inputs.truth = loaded.truth.as_ref().map(|(f, _)| f.clone());

    let table = bench.ablate(&cfg.pipeline, &spec, &a.out);
    table.write(&a.out)?;
    manifest.artifact("table_text", "table.txt");
    manifest.artifact("table_json", "table.json");
    for cell in &table.cells {
        let rel = cell.dir.strip_prefix(&a.out).unwrap_or(&cell.dir).to_path_buf();
        let key = format!("{}-steps{}", cell.variant, cell.steps);
        for (name, file) in [
            ("traces", TRACE_FILE),
            ("per_query", PER_QUERY_FILE),
            ("report", REPORT_FILE),
        ] {
            if cell.dir.join(file).is_file() {
                manifest.artifact(&format!("{key}/{name}"), rel.join(file));
            }
        }
    }
    manifest.finish(&a.out)?;
    print!("{}", table.render_text());
    let failed = table.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        return Err(Failure::Data(format!(
            "{failed} of {} cells failed; see {}",
            table.cells.len(),
            a.out.join("table.json").display()
        )));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let path = if a.path.is_dir() {
        ["table.json", REPORT_FILE]
            .iter()
            .map(|f| a.path.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Failure::Data(format!(
                    "{} holds neither table.json nor {REPORT_FILE}",
                    a.path.display()
                ))
            })?
    } else {
        a.path.clone()
    };
    let text = fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
    let bad = |e: serde_json::Error| Failure::Data(format!("{}: {e}", path.display()));
    if path.file_name().is_some_and(|n| n == "table.json") {
        let table: AblationTable = serde_json::from_str(&text).map_err(bad)?;
        print!("{}", table.render_text());
    } else {
        let report: MetricReport = serde_json::from_str(&text).map_err(bad)?;
        print!("{}", render_report(&report));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = ChainSpec {
        n_queries: a.n_queries,
        hops_per_query: a.hops,
        distractors_per_gold: a.distractors,
        near_miss_rate: a.near_miss,
        seed: a.seed,
    };
    let summary = synthetic::generate(&spec, &a.out)?;
    println!(
        "{} queries over {} documents in {}",
        summary.n_queries,
        summary.n_documents,
        a.out.display()
    );
    for (hops, n) in &summary.n_required_histogram {
        println!("  {hops} hops: {n}");
    }
    println!("post-check: {} gold titles rank first", summary.gold_checked);
    Ok(())
}
