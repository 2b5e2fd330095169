use std::path::PathBuf;
use std::process::ExitCode;

use affect_core::annotation::{
    prompt_hash, validate_providers, AnnotationCache, Annotator, Backoff, HttpBackend, MockBackend, ProviderConfig,
    K_MAX,
};
use affect_core::corpus::{RoleFilter, Session, Turn, DEFAULT_SESSION_GAP_MINUTES};
use affect_core::dynamics::{AffectAnalysis, AnalysisOptions};
use affect_core::pipeline::{
    build_jobs, fuse_from_cache, load_corpus, load_providers, read_fused, run_analysis, run_pipeline, segment,
    write_fused, write_json, write_reports, PipelineConfig, PipelineError, Stage,
};
use affect_core::report::analysis_json;
use clap::{Args, Parser, Subcommand};

/// Multi-model emotion annotation and affect dynamics for tutoring dialogues.
#[derive(Parser)]
#[command(name = "affect", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate every turn with every provider, filling the cache.
    Annotate(AnnotateArgs),
    /// Fuse cached annotations into one record per turn.
    Fuse(FuseArgs),
    /// Print transition, label and score analyses as JSON.
    Analyze(AnalyzeArgs),
    /// Write the CSV reports.
    Report(ReportArgs),
    /// Run every stage from a TOML config.
    Run(RunArgs),
}

#[derive(Args)]
struct AnnotateArgs {
    /// TOML file with [[providers]] tables.
    #[arg(long, required_unless_present = "mock")]
    providers: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    cache_dir: PathBuf,
    /// Use the deterministic offline backend.
    #[arg(long)]
    mock: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SESSION_GAP_MINUTES)]
    session_gap_minutes: f64,
    /// Earlier turns of the same session to include in each prompt.
    #[arg(long, default_value_t = 0)]
    context_window: usize,
    /// Re-request pairs whose earlier attempt failed.
    #[arg(long)]
    retry_failed: bool,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Args)]
struct FuseArgs {
    /// Annotation cache directory.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Only use answers from these providers.
    #[arg(long, conflicts_with = "mock")]
    providers: Option<PathBuf>,
    /// Only use mock answers for --seed.
    #[arg(long)]
    mock: bool,
    #[arg(long, default_value_t = 0, requires = "mock")]
    seed: u64,
    #[arg(long, default_value_t = K_MAX)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    context_window: usize,
}

#[derive(Args)]
struct AnalysisArgs {
    /// Corpus JSONL the fused file was produced from.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    fused: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value = "student")]
    role_filter: RoleFilter,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long, default_value_t = DEFAULT_SESSION_GAP_MINUTES)]
    session_gap_minutes: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Force the offline backend regardless of the config.
    #[arg(long)]
    mock: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn annotate(a: AnnotateArgs) -> Result<(), PipelineError> {
    if a.max_in_flight < 1 {
        return Err(usage("--max-in-flight must be at least 1"));
    }
    let providers = match &a.providers {
        Some(path) => load_providers(path)?,
        None => Vec::new(),
    };
    validate_providers(&providers, a.mock).map_err(|e| usage(e.to_string()))?;
    let providers = if a.mock {
        let mut cfg = PipelineConfig::new(&a.input, &a.cache_dir, ".");
        cfg.mock = true;
        cfg.seed = a.seed;
        cfg.providers = providers;
        cfg.effective_providers()
    } else {
        providers
    };

    let turns = load_corpus(&a.input)?;
    let sessions = segment(&turns, a.session_gap_minutes)?;
    let cache = AnnotationCache::open(&a.cache_dir).map_err(|e| PipelineError::data(Stage::Annotate, e))?;
    let jobs = build_jobs(&turns, &sessions, a.context_window);

    let stats = if a.mock {
        let ann = Annotator::new(MockBackend::new(a.seed), cache, providers)
            .with_backoff(Backoff::NONE)
            .with_context_window(a.context_window)
            .with_retry_failed(a.retry_failed)
            .with_max_in_flight(a.max_in_flight);
        ann.annotate_all(&jobs);
        ann.stats()
    } else {
        let backend = HttpBackend::from_env(&providers).map_err(|e| PipelineError::Provider(e.to_string()))?;
        let ann = Annotator::new(backend, cache, providers)
            .with_context_window(a.context_window)
            .with_retry_failed(a.retry_failed)
            .with_max_in_flight(a.max_in_flight);
        ann.annotate_all(&jobs);
        ann.stats()
    };
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    if stats.requested > 0 && stats.succeeded == 0 {
        return Err(PipelineError::Provider(format!("all {} annotation requests failed", stats.requested)));
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<(), PipelineError> {
    if !(1..=K_MAX).contains(&a.k_max) {
        return Err(usage(format!("--k-max must be in 1..={K_MAX}")));
    }
    if !a.annotations.is_dir() {
        return Err(PipelineError::data(
            Stage::Fuse,
            format!("{}: not a directory", a.annotations.display()),
        ));
    }
    let filter: Option<Vec<ProviderConfig>> = if let Some(path) = &a.providers {
        Some(load_providers(path)?)
    } else if a.mock {
        let mut cfg = PipelineConfig::new(".", &a.annotations, ".");
        cfg.mock = true;
        cfg.seed = a.seed;
        Some(cfg.effective_providers())
    } else {
        None
    };
    let cache = AnnotationCache::open(&a.annotations).map_err(|e| PipelineError::data(Stage::Fuse, e))?;
    let out = fuse_from_cache(&cache, &prompt_hash(a.context_window), filter.as_deref(), a.k_max)?;
    if out.fused.is_empty() {
        return Err(PipelineError::data(
            Stage::Fuse,
            format!("no usable annotations in {}", a.annotations.display()),
        ));
    }
    write_fused(&a.output, &out.fused)?;
    eprintln!(
        "fused {} turns ({} unfusable) -> {}",
        out.fused.len(),
        out.unfusable.len(),
        a.output.display()
    );
    Ok(())
}

fn analysis(a: &AnalysisArgs) -> Result<(Vec<Turn>, Vec<Session>, AffectAnalysis), PipelineError> {
    if !(a.beta.is_finite() && a.beta > 0.0) {
        return Err(usage("--beta must be positive"));
    }
    if a.top_n < 1 {
        return Err(usage("--top-n must be at least 1"));
    }
    if !(a.session_gap_minutes.is_finite() && a.session_gap_minutes > 0.0) {
        return Err(usage("--session-gap-minutes must be positive"));
    }
    let turns = load_corpus(&a.input)?;
    let sessions = segment(&turns, a.session_gap_minutes)?;
    let fused = read_fused(&a.fused)?;
    let options = AnalysisOptions {
        beta: a.beta,
        role_filter: a.role_filter,
        top_n: a.top_n,
    };
    let result = run_analysis(&turns, &sessions, &fused, options)?;
    Ok((turns, sessions, result))
}

fn analyze(a: AnalyzeArgs) -> Result<(), PipelineError> {
    let (_, _, result) = analysis(&a.analysis)?;
    let json = analysis_json(&result);
    match &a.output {
        Some(path) => write_json(path, &json, Stage::Analyze),
        None => {
            println!("{}", serde_json::to_string_pretty(&json).expect("json"));
            Ok(())
        }
    }
}

fn report(a: ReportArgs) -> Result<(), PipelineError> {
    let (turns, sessions, result) = analysis(&a.analysis)?;
    for path in write_reports(&a.output_dir, &turns, &sessions, &result)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if a.mock {
        cfg.mock = true;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let manifest = run_pipeline(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&manifest.counts).expect("counts"));
    eprintln!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Annotate(a) => annotate(a),
        Command::Fuse(a) => fuse(a),
        Command::Analyze(a) => analyze(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
