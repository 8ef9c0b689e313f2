use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use rt_core::backends::mock_server::MockServer;
use rt_core::eval_metrics::{eval_sts, Metric, MetricReport, StsSide};
use rt_core::experiments::fixture::make_two_hop_fixture;
use rt_core::experiments::io::{load_corpus, load_qrels, load_queries, load_sts_pairs, load_trec_run, write_trec_run};
use rt_core::experiments::report::summary_markdown;
use rt_core::experiments::spec::{BackendSpec, ExperimentSpec, ENV_ENDPOINT, ENV_TOKEN};
use rt_core::experiments::{emit_reports, run_sweep};
use rt_core::toy_encoder::PoolScope;
use rt_core::{
    build_index, cosine_similarity, refine, search, CorpusIndex, EncoderBackend, Query, RefineConfig, RunList, ScoredDoc,
    StateWindow,
};

#[derive(Parser)]
#[command(name = "rt", version, about = "Iterative query refinement for text embeddings")]
struct Cli {
    /// Experiment file (TOML or JSON). Flags override its settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a JSONL corpus and write an RTIX index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Refine queries and rank an index; prints a TREC run.
    Search {
        #[arg(long)]
        index: PathBuf,
        /// A single query text.
        #[arg(long, conflicts_with = "queries")]
        query: Option<String>,
        /// JSONL queries file.
        #[arg(long, required_unless_present = "query")]
        queries: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "rt")]
        tag: String,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        refine: RefineArgs,
    },
    /// Print the refinement trajectory of one text as JSON.
    Refine {
        text: String,
        /// Include every state vector, not just the last.
        #[arg(long)]
        all_states: bool,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        refine: RefineArgs,
    },
    /// Score a TREC run against qrels, or refined STS pairs against gold.
    Eval {
        #[arg(long, requires = "qrels", conflicts_with = "sts")]
        run: Option<PathBuf>,
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Metrics such as ndcg@10, recall@100, mrr.
        #[arg(long = "metric", value_delimiter = ',')]
        metrics: Vec<Metric>,
        /// Tab-separated `a, b, gold` pairs.
        #[arg(long, required_unless_present = "run")]
        sts: Option<PathBuf>,
        /// Refine both sentences of each pair instead of only the first.
        #[arg(long)]
        sts_both: bool,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        refine: RefineArgs,
    },
    /// Run the full experiment grid and write reports.
    Sweep {
        /// Override the step grid, e.g. 0,1,2,4.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        state_window: Option<StateWindow>,
    },
    /// Write the two-hop synthetic dataset and its additive backend parameters.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Serve a local backend over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Require this bearer token.
        #[arg(long, env = ENV_TOKEN)]
        token: Option<String>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Toy,
    Additive,
    Remote,
}

#[derive(Args, Clone)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width (toy model width, additive dim, or expected remote dim).
    #[arg(long)]
    dim: Option<usize>,
    /// Additive mixing weight.
    #[arg(long)]
    mix: Option<f64>,
    /// Additive parameters JSON, as written by `rt fixture`.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    pool_scope: Option<PoolScope>,
    #[arg(long, env = ENV_ENDPOINT)]
    endpoint: Option<String>,
}

#[derive(Args, Clone)]
struct RefineArgs {
    #[arg(long)]
    steps: Option<usize>,
    /// Stop once consecutive states have cosine above 1 - epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    early_stop: bool,
    /// `all` or the number of most recent states fed back.
    #[arg(long)]
    state_window: Option<StateWindow>,
}

fn load_spec(config: Option<&Path>) -> Result<ExperimentSpec> {
    match config {
        Some(p) => ExperimentSpec::from_path(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentSpec::default()),
    }
}

fn kind_of(spec: &BackendSpec) -> BackendKind {
    match spec {
        BackendSpec::Toy { .. } => BackendKind::Toy,
        BackendSpec::Additive { .. } => BackendKind::Additive,
        BackendSpec::Remote { .. } => BackendKind::Remote,
    }
}

fn backend_spec(spec: &ExperimentSpec, args: &BackendArgs) -> BackendSpec {
    let from_config = spec.backends.first().cloned().unwrap_or_default();
    let kind = match (args.backend, &args.params) {
        (Some(k), _) => k,
        (None, Some(_)) => BackendKind::Additive,
        (None, None) => kind_of(&from_config),
    };
    let mut b = if kind_of(&from_config) == kind {
        from_config
    } else {
        match kind {
            BackendKind::Toy => BackendSpec::default(),
            BackendKind::Additive => BackendSpec::Additive {
                dim: 32,
                mix: 0.5,
                seed: None,
                params_file: None,
            },
            BackendKind::Remote => BackendSpec::Remote {
                endpoint: None,
                dim: None,
                timeout_ms: 30_000,
                retries: 3,
                max_in_flight: 8,
            },
        }
    };
    match &mut b {
        BackendSpec::Toy {
            seed,
            hyper,
            pool_scope,
        } => {
            *seed = args.seed.or(*seed);
            if let Some(d) = args.dim {
                hyper.dim = d;
            }
            if let Some(p) = args.pool_scope {
                *pool_scope = p;
            }
        }
        BackendSpec::Additive {
            dim,
            mix,
            seed,
            params_file,
        } => {
            *seed = args.seed.or(*seed);
            *dim = args.dim.unwrap_or(*dim);
            *mix = args.mix.unwrap_or(*mix);
            if args.params.is_some() {
                params_file.clone_from(&args.params);
            }
        }
        BackendSpec::Remote { endpoint, dim, .. } => {
            if args.endpoint.is_some() {
                endpoint.clone_from(&args.endpoint);
            }
            *dim = args.dim.or(*dim);
        }
    }
    b
}

fn build_backend(spec: &ExperimentSpec, args: &BackendArgs) -> Result<Box<dyn EncoderBackend<f64>>> {
    let seed = args.seed.unwrap_or(spec.seed);
    backend_spec(spec, args).build(seed).context("building backend")
}

fn refine_config(spec: &ExperimentSpec, args: &RefineArgs) -> Result<RefineConfig> {
    let mut cfg = spec.refine_config(args.steps.unwrap_or(RefineConfig::default().steps));
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
        cfg.early_stop = true;
    }
    cfg.early_stop |= args.early_stop;
    if let Some(w) = args.state_window {
        cfg.state_window = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn report_json(r: &MetricReport) -> serde_json::Value {
    json!({
        "metric": r.metric,
        "k": r.k,
        "value": r.aggregate,
        "queries": r.per_query.len(),
        "no_relevant": r.no_relevant,
        "unjudged": r.unjudged,
    })
}

fn cmd_index(spec: &ExperimentSpec, corpus: &Path, out: &Path, args: &BackendArgs) -> Result<()> {
    let backend = build_backend(spec, args)?;
    let docs = load_corpus(corpus)?;
    let index = build_index(backend.as_ref(), &docs)?;
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    index.save(out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("indexed {} documents (dim {}) with {}", index.len(), index.dim(), backend.name());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    spec: &ExperimentSpec,
    index_path: &Path,
    query: Option<&str>,
    queries: Option<&Path>,
    k: usize,
    out: Option<&Path>,
    tag: &str,
    bargs: &BackendArgs,
    rargs: &RefineArgs,
) -> Result<()> {
    let backend = build_backend(spec, bargs)?;
    let cfg = refine_config(spec, rargs)?;
    let index = CorpusIndex::<f64>::load(index_path, backend.name())
        .with_context(|| format!("reading {}", index_path.display()))?;
    if index.dim() != backend.dim() {
        bail!("index has dim {} but backend {} produces dim {}", index.dim(), backend.name(), backend.dim());
    }
    let queries = match (query, queries) {
        (Some(text), _) => vec![Query::new("q", text)],
        (None, Some(p)) => load_queries(p)?,
        (None, None) => bail!("pass --query or --queries"),
    };
    let trajectories = rt_core::refine_batch(backend.as_ref(), &queries, &cfg)?.into_result()?;
    let mut run = RunList::new();
    for (qid, t) in &trajectories {
        let hits = search(&index, t.last(), k)?;
        run.insert(
            qid,
            hits.into_iter()
                .map(|h| ScoredDoc {
                    doc_id: h.doc_id,
                    score: h.score,
                })
                .collect(),
        )?;
    }
    let mut w = output(out)?;
    write_trec_run(&mut w, &run, tag)?;
    w.flush()?;
    Ok(())
}

fn cmd_refine(spec: &ExperimentSpec, text: &str, all_states: bool, bargs: &BackendArgs, rargs: &RefineArgs) -> Result<()> {
    let backend = build_backend(spec, bargs)?;
    let cfg = refine_config(spec, rargs)?;
    let t = refine(backend.as_ref(), text, &cfg)?;
    let states = t.states();
    let step_cosines = states
        .windows(2)
        .map(|w| cosine_similarity(&w[1], &w[0]))
        .collect::<rt_core::Result<Vec<f64>>>()?;
    let to_initial = states
        .iter()
        .map(|s| cosine_similarity(s, t.initial()))
        .collect::<rt_core::Result<Vec<f64>>>()?;
    let mut doc = json!({
        "backend": backend.name(),
        "dim": t.dim(),
        "steps_executed": t.steps_executed(),
        "stop_reason": format!("{:?}", t.stop_reason()),
        "cos_to_previous": step_cosines,
        "cos_to_initial": to_initial,
        "final": t.last().values(),
    });
    if all_states {
        doc["states"] = json!(states.iter().map(|s| s.values()).collect::<Vec<_>>());
    }
    emit(&serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    spec: &ExperimentSpec,
    run: Option<&Path>,
    qrels: Option<&Path>,
    metrics: &[Metric],
    sts: Option<&Path>,
    sts_both: bool,
    bargs: &BackendArgs,
    rargs: &RefineArgs,
) -> Result<()> {
    if let Some(sts) = sts {
        let backend = build_backend(spec, bargs)?;
        let cfg = refine_config(spec, rargs)?;
        let pairs = load_sts_pairs(sts)?;
        let side = if sts_both { StsSide::Both } else { StsSide::First };
        let rho = eval_sts(backend.as_ref(), &cfg, &pairs, side)?;
        let doc = json!({
            "backend": backend.name(),
            "steps": cfg.steps,
            "pairs": pairs.len(),
            "spearman": rho,
        });
        emit(&serde_json::to_string_pretty(&doc)?)?;
        return Ok(());
    }
    let (Some(run), Some(qrels)) = (run, qrels) else {
        bail!("pass --run with --qrels, or --sts");
    };
    let run = load_trec_run(run)?;
    let qrels = load_qrels(qrels)?;
    let metrics = if metrics.is_empty() { spec.metrics.clone() } else { metrics.to_vec() };
    let reports = metrics
        .iter()
        .map(|m| m.evaluate(&run, &qrels).map(|r| report_json(&r)))
        .collect::<rt_core::Result<Vec<_>>>()?;
    emit(&serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}

fn cmd_sweep(
    mut spec: ExperimentSpec,
    steps: Vec<usize>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epsilon: Option<f64>,
    state_window: Option<StateWindow>,
) -> Result<()> {
    if !steps.is_empty() {
        spec.steps = steps;
    }
    if let Some(o) = out {
        spec.out_dir = o;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(e) = epsilon {
        spec.epsilon = e;
        spec.early_stop = true;
    }
    if let Some(w) = state_window {
        spec.state_window = w;
    }
    let result = run_sweep(&spec)?;
    emit_reports(&result, &spec.out_dir).with_context(|| format!("writing {}", spec.out_dir.display()))?;
    emit(summary_markdown(&result).trim_end())?;
    for f in &result.failures {
        eprintln!("failed: {} / {} / {:?}: {}", f.dataset, f.backend, f.steps, f.error);
    }
    if result.points.is_empty() {
        bail!("no grid point succeeded");
    }
    Ok(())
}

fn cmd_fixture(out: &Path, n: usize, dim: usize, seed: u64) -> Result<()> {
    let f = make_two_hop_fixture(n, dim, seed)?;
    fs::create_dir_all(out)?;
    let mut corpus = String::new();
    for d in &f.corpus {
        corpus.push_str(&json!({"_id": d.id, "title": d.title, "text": d.text}).to_string());
        corpus.push('\n');
    }
    let mut queries = String::new();
    for q in &f.queries {
        queries.push_str(&json!({"_id": q.id, "text": q.text}).to_string());
        queries.push('\n');
    }
    let mut qrels = String::from("query-id\tcorpus-id\tscore\n");
    for q in &f.queries {
        let mut judged: Vec<(&String, &u32)> = f.qrels.judgments(&q.id).into_iter().flatten().collect();
        judged.sort();
        for (doc, grade) in judged {
            qrels.push_str(&format!("{}\t{doc}\t{grade}\n", q.id));
        }
    }
    fs::write(out.join("corpus.jsonl"), corpus)?;
    fs::write(out.join("queries.jsonl"), queries)?;
    fs::write(out.join("qrels.tsv"), qrels)?;
    fs::write(out.join("additive.json"), serde_json::to_string_pretty(&f.params)?)?;
    eprintln!("wrote {} queries, {} documents, margin {:.4}", f.queries.len(), f.corpus.len(), f.margin);
    Ok(())
}

fn cmd_serve(spec: &ExperimentSpec, addr: SocketAddr, token: Option<String>, bargs: &BackendArgs) -> Result<()> {
    let backend: Arc<dyn EncoderBackend<f64>> = Arc::from(build_backend(spec, bargs)?);
    let name = backend.name().to_string();
    let server = MockServer::bind(addr, backend)?;
    server.require_token(token.filter(|t| !t.is_empty()));
    emit(&format!("serving {name} at {}", server.url()))?;
    server.wait();
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let spec = load_spec(cli.config.as_deref())?;
    match cli.command {
        Command::Index { corpus, out, backend } => cmd_index(&spec, &corpus, &out, &backend),
        Command::Search {
            index,
            query,
            queries,
            k,
            out,
            tag,
            backend,
            refine,
        } => cmd_search(&spec, &index, query.as_deref(), queries.as_deref(), k, out.as_deref(), &tag, &backend, &refine),
        Command::Refine {
            text,
            all_states,
            backend,
            refine,
        } => cmd_refine(&spec, &text, all_states, &backend, &refine),
        Command::Eval {
            run,
            qrels,
            metrics,
            sts,
            sts_both,
            backend,
            refine,
        } => cmd_eval(&spec, run.as_deref(), qrels.as_deref(), &metrics, sts.as_deref(), sts_both, &backend, &refine),
        Command::Sweep {
            steps,
            out,
            seed,
            epsilon,
            state_window,
        } => cmd_sweep(spec, steps, out, seed, epsilon, state_window),
        Command::Fixture { out, n, dim, seed } => cmd_fixture(&out, n, dim, seed),
        Command::Serve {
            addr,
            token,
            backend,
        } => cmd_serve(&spec, addr, token, &backend),
    }
}
