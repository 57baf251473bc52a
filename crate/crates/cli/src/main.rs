use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sentropy_core::dataset::load_corpus;
use sentropy_core::eval::overall_table;
use sentropy_core::genclient::{CachedBackend, HttpGateway, LogprobMode, SimulatedBackend};
use sentropy_core::pipeline::{self, StageOutcome, REPORT_FILE};
use sentropy_core::run::MANIFEST_FILE;
use sentropy_core::{
    BackendKind, Error, ErrorKind, EvalReport, GenerationBackend, PipelineConfig, Question, RunDir, RunSettings, Stage,
};
use sentropy_review::annotation::load_tokens;
use sentropy_review::ReviewError;

#[derive(Debug, Parser)]
#[command(
    name = "sentropy",
    version,
    about = "Semantic-entropy runs over clinical short-answer questions"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding run directories.
    #[arg(long, global = true, env = "SENTROPY_RUNS_ROOT")]
    runs_root: Option<PathBuf>,

    /// Completion cache; defaults to `<runs-root>/cache`.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate a corpus and create a run directory.
    Ingest(IngestArgs),
    /// Sample answers for every eligible question.
    Generate(StageArgs),
    /// Group answers by bidirectional entailment.
    Cluster(StageArgs),
    /// Perplexity and semantic entropy per question.
    Metrics(StageArgs),
    /// Correctness of the chosen answers.
    Score(StageArgs),
    /// Accuracy and AUROC with bootstrap intervals.
    Evaluate(StageArgs),
    /// Serve bundles and collect expert annotations.
    ReviewServe(ReviewArgs),
    /// Print the evaluation tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct RunArg {
    /// Run id under the runs root, or a run directory.
    #[arg(long)]
    run: String,
}

#[derive(Debug, Args)]
struct StageArgs {
    #[command(flatten)]
    run: RunArg,

    /// Recompute a complete stage; later stages go back to pending.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Corpus JSONL file.
    #[arg(long)]
    corpus: Option<PathBuf>,

    #[arg(long)]
    run_id: Option<String>,

    /// Label uncategorized questions with the backend.
    #[arg(long)]
    classify: bool,

    /// Replace an existing run with the same id.
    #[arg(long)]
    overwrite: bool,

    #[arg(long)]
    backend: Option<BackendKind>,

    /// `exact`, `normalized-exact`, `scripted:<file>` or `llm`.
    #[arg(long)]
    judge: Option<String>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    model: Option<String>,

    /// Answers sampled per question.
    #[arg(long)]
    samples: Option<usize>,

    #[arg(long)]
    temperature: Option<f64>,

    /// Run without token log-probabilities.
    #[arg(long)]
    discrete_only: bool,

    #[arg(long)]
    resamples: Option<usize>,

    #[arg(long)]
    max_in_flight: Option<usize>,

    #[arg(long)]
    base_url: Option<String>,

    #[arg(long)]
    timeout_secs: Option<u64>,

    /// RFC 3339 timestamp for the manifest.
    #[arg(long)]
    created_at: Option<String>,
}

#[derive(Debug, Args)]
struct ReviewArgs {
    #[command(flatten)]
    run: RunArg,

    #[arg(long)]
    bind: Option<String>,

    /// Lines of `<token> <reviewer_id>`.
    #[arg(long)]
    token_file: Option<PathBuf>,

    #[arg(long)]
    review_size: Option<usize>,

    /// Sampling seed for a new review set; defaults to the run seed.
    #[arg(long)]
    review_seed: Option<u64>,

    /// Static review UI assets.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    run: RunArg,

    /// Second run whose rows join the temperature table.
    #[arg(long)]
    compare: Option<String>,
}

struct Ctx {
    config: PipelineConfig,
    runs_root: PathBuf,
    cache_root: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> anyhow::Result<Self> {
        let config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let runs_root = cli
            .runs_root
            .clone()
            .or_else(|| config.runs_root.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        let cache_root = cli
            .cache_dir
            .clone()
            .or_else(|| config.cache_root.clone())
            .unwrap_or_else(|| runs_root.join("cache"));
        Ok(Self {
            config,
            runs_root,
            cache_root,
        })
    }

    fn run_path(&self, run: &str) -> PathBuf {
        let direct = Path::new(run);
        if direct.join(MANIFEST_FILE).exists() {
            direct.to_path_buf()
        } else {
            self.runs_root.join(run)
        }
    }

    fn open_locked(&self, run: &str) -> anyhow::Result<RunDir> {
        Ok(RunDir::open_locked(&self.run_path(run))?)
    }

    fn open(&self, run: &str) -> anyhow::Result<RunDir> {
        let path = self.run_path(run);
        if !path.join(MANIFEST_FILE).exists() {
            return Err(Error::Config(format!("no run at {} (run `sentropy ingest` first)", path.display())).into());
        }
        Ok(RunDir::open(&path)?)
    }

    fn backend(&self, settings: &RunSettings, questions: &[Question]) -> anyhow::Result<Arc<dyn GenerationBackend>> {
        let cache = self.cache_root.clone();
        Ok(match settings.backend {
            BackendKind::Live => Arc::new(CachedBackend::new(HttpGateway::new(settings.gateway.clone())?, cache)),
            BackendKind::Stub => Arc::new(CachedBackend::new(
                SimulatedBackend::with_params(questions, settings.seed, &settings.simulation),
                cache,
            )),
        })
    }
}

fn ingest(ctx: &Ctx, args: &IngestArgs) -> anyhow::Result<()> {
    let mut config = ctx.config.clone();
    let g = &mut config.generation;
    if let Some(m) = &args.model {
        g.model_id = m.clone();
    }
    if let Some(m) = args.samples {
        g.num_samples = m;
    }
    if let Some(t) = args.temperature {
        g.answer_temperature = t;
    }
    if args.discrete_only {
        g.logprob_mode = LogprobMode::DiscreteOnly;
    }
    let r = &mut config.run;
    if let Some(b) = args.backend {
        r.backend = b;
    }
    if let Some(j) = &args.judge {
        r.judge = j.clone();
    }
    if let Some(s) = args.seed {
        r.seed = s;
    }
    if let Some(n) = args.resamples {
        r.bootstrap_resamples = n;
    }
    if let Some(n) = args.max_in_flight {
        r.max_in_flight = n;
    }
    if let Some(u) = &args.base_url {
        r.gateway.base_url = u.clone();
    }
    if let Some(t) = args.timeout_secs {
        r.gateway.timeout_secs = t;
    }
    if args.run_id.is_some() {
        config.run_id = args.run_id.clone();
    }
    if args.created_at.is_some() {
        config.created_at = args.created_at.clone();
    }
    let corpus = args
        .corpus
        .clone()
        .or_else(|| config.corpus.clone())
        .ok_or_else(|| Error::Config("no corpus given (--corpus or `corpus` in the config file)".into()))?;

    let classifier = if args.classify {
        config.validate()?;
        Some(ctx.backend(&config.run, &load_corpus(&corpus)?)?)
    } else {
        None
    };
    let s = pipeline::ingest(&corpus, &ctx.runs_root, &config, classifier.as_deref(), args.overwrite)?;
    if s.reused {
        println!(
            "ingest: run {} already exists with this corpus and configuration",
            s.run_id
        );
    } else {
        println!(
            "ingest: {} questions loaded, {} eligible, {} classified",
            s.loaded, s.eligible, s.classified
        );
    }
    println!("run {} at {}", s.run_id, s.run_path.display());
    Ok(())
}

fn print_outcome(stage: Stage, run: &RunDir, outcome: &StageOutcome) {
    match outcome {
        StageOutcome::Completed { records } => println!(
            "{stage}: {records} records written to {}",
            run.path().join(stage.file_name()).display()
        ),
        StageOutcome::AlreadyComplete => {
            println!(
                "{stage}: already complete for run {}; pass --overwrite to recompute",
                run.manifest().run_id
            )
        }
    }
}

fn stage(ctx: &Ctx, stage: Stage, args: &StageArgs) -> anyhow::Result<()> {
    let mut run = ctx.open_locked(&args.run.run)?;
    let needs_backend = stage == Stage::Generate || run.manifest().settings.judge == "llm";
    let backend = if needs_backend && matches!(stage, Stage::Generate | Stage::Cluster | Stage::Score) {
        Some(ctx.backend(&run.manifest().settings, run.questions())?)
    } else {
        None
    };
    let outcome = match stage {
        Stage::Generate => {
            let b = backend.expect("generate has a backend");
            pipeline::run_generate(&mut run, b.as_ref(), args.overwrite)?
        }
        Stage::Cluster => {
            let e = pipeline::build_entailer(&run, backend)?;
            let out = pipeline::run_cluster(&mut run, &e, args.overwrite)?;
            tracing::info!(judge_calls = e.judge_calls(), "clustering done");
            out
        }
        Stage::Metrics => pipeline::run_metrics(&mut run, args.overwrite)?,
        Stage::Score => {
            let e = pipeline::build_entailer(&run, backend)?;
            pipeline::run_score(&mut run, &e, args.overwrite)?
        }
        Stage::Evaluate => pipeline::run_evaluate(&mut run, args.overwrite)?,
    };
    print_outcome(stage, &run, &outcome);
    if stage == Stage::Evaluate {
        let reports: Vec<EvalReport> = run.read_stage(Stage::Evaluate)?;
        print!("\n{}", overall_table("Overall performance", &reports).render());
    }
    Ok(())
}

fn report(ctx: &Ctx, args: &ReportArgs) -> anyhow::Result<()> {
    let run = ctx.open(&args.run.run)?;
    run.require(Stage::Evaluate, "report")?;
    let other = args.compare.as_deref().map(|c| ctx.open(c)).transpose()?;
    if let Some(o) = &other {
        o.require(Stage::Score, "report --compare")?;
    }
    let text = pipeline::render_report(&run, other.as_ref())?;
    run.write_aux(REPORT_FILE, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn review_serve(ctx: &Ctx, args: &ReviewArgs) -> anyhow::Result<()> {
    let run = ctx.open(&args.run.run)?;
    let settings = &ctx.config.review;
    let token_file = args
        .token_file
        .clone()
        .or_else(|| settings.token_file.clone())
        .ok_or_else(|| Error::Config("review-serve needs --token-file".into()))?;
    let tokens = load_tokens(&token_file)?;
    let size = args.review_size.unwrap_or(settings.review_size);
    let seed = args.review_seed.unwrap_or(run.manifest().settings.seed);
    let state = sentropy_review::AppState::from_run(&run, size, seed, tokens)?;
    let ui_dir = args.ui_dir.clone().or_else(|| settings.ui_dir.clone());
    let app = sentropy_review::router(Arc::new(state), ui_dir.as_deref());
    let bind = args.bind.clone().unwrap_or_else(|| settings.bind.clone());

    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        println!(
            "review service for run {} on http://{}",
            run.manifest().run_id,
            listener.local_addr()?
        );
        sentropy_review::serve(listener, app).await?;
        anyhow::Ok(())
    })
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Generate(a) => stage(&ctx, Stage::Generate, a),
        Command::Cluster(a) => stage(&ctx, Stage::Cluster, a),
        Command::Metrics(a) => stage(&ctx, Stage::Metrics, a),
        Command::Score(a) => stage(&ctx, Stage::Score, a),
        Command::Evaluate(a) => stage(&ctx, Stage::Evaluate, a),
        Command::ReviewServe(a) => review_serve(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn kind_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Backend => 3,
        ErrorKind::Validation => 4,
        ErrorKind::Io => 1,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return kind_code(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<ReviewError>() {
            return match e {
                ReviewError::Core(c) => kind_code(c.kind()),
                ReviewError::Config(_) | ReviewError::TooLarge { .. } => 2,
                ReviewError::Validation(_) | ReviewError::NotFound(_) => 4,
                ReviewError::Unauthorized => 1,
            };
        }
    }
    1
}

fn hint(err: &anyhow::Error) -> Option<String> {
    let order = |e: &Error| match e {
        Error::StageOrder { missing, .. } => Some(format!("run `sentropy {missing}` first")),
        _ => None,
    };
    err.chain().find_map(|cause| {
        cause
            .downcast_ref::<Error>()
            .and_then(order)
            .or_else(|| match cause.downcast_ref::<ReviewError>() {
                Some(ReviewError::Core(e)) => order(e),
                _ => None,
            })
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SENTROPY_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(h) = hint(&err) {
                eprintln!("hint: {h}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
