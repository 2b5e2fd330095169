//! End-to-end runs: ingest, segment, annotate, fuse, analyze, report.
//!
//! Each stage is also exposed on its own so the CLI can run them
//! separately against files written by earlier stages.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    validate_providers, AnnotationCache, AnnotationStats, Annotator, Backend, Backoff, CacheStatus,
    HttpBackend, Job, MockBackend, ModelAnnotation, Outcome, ProviderConfig, K_MAX, PROMPT_VERSION,
};
use crate::corpus::{parse_corpus, segment_sessions, summarize_corpus, RoleFilter, Session, Turn};
use crate::dynamics::{analyze, AffectAnalysis, AnalysisOptions};
use crate::fusion::{fuse_turn, FusedAnnotation, FusionError};
use crate::report::{analysis_json, emit_reports};

pub const FUSED_FILE: &str = "fused.jsonl";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IN_PROGRESS_FILE: &str = ".in_progress";

pub const DEFAULT_MOCK_PROVIDERS: [&str; 3] = ["mock-alpha", "mock-beta", "mock-gamma"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Ingest,
    Segment,
    Annotate,
    Fuse,
    Analyze,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Annotate => "annotate",
            Stage::Fuse => "fuse",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {message}", stage.as_str())]
    Data { stage: Stage, message: String },
    #[error("annotate: {0}")]
    Provider(String),
}

impl PipelineError {
    pub fn data(stage: Stage, e: impl std::fmt::Display) -> Self {
        PipelineError::Data {
            stage,
            message: e.to_string(),
        }
    }

    /// 1 for bad usage or config, 2 for bad data, 3 for provider failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data { .. } => 2,
            PipelineError::Provider(_) => 3,
        }
    }
}

fn default_k_max() -> usize {
    K_MAX
}
fn default_beta() -> f64 {
    1.0
}
fn default_gap() -> f64 {
    crate::corpus::DEFAULT_SESSION_GAP_MINUTES
}
fn default_top_n() -> usize {
    10
}
fn default_in_flight() -> usize {
    4
}

/// Everything a run needs. Relative paths in a config file resolve against
/// the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gap")]
    pub session_gap_minutes: f64,
    #[serde(default)]
    pub role_filter: RoleFilter,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default)]
    pub mock: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub context_window: usize,
    #[serde(default)]
    pub retry_failed: bool,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>, cache_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input: input.into(),
            cache_dir: cache_dir.into(),
            output_dir: output_dir.into(),
            providers: Vec::new(),
            k_max: K_MAX,
            beta: 1.0,
            session_gap_minutes: default_gap(),
            role_filter: RoleFilter::Student,
            top_n: 10,
            mock: false,
            seed: 0,
            max_in_flight: 4,
            context_window: 0,
            retry_failed: false,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.input, &mut cfg.cache_dir, &mut cfg.output_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(1..=K_MAX).contains(&self.k_max) {
            return bad(format!("k_max must be in 1..={K_MAX}, got {}", self.k_max));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.session_gap_minutes.is_finite() && self.session_gap_minutes > 0.0) {
            return bad(format!(
                "session_gap_minutes must be positive, got {}",
                self.session_gap_minutes
            ));
        }
        if self.top_n < 1 {
            return bad("top_n must be at least 1".into());
        }
        if self.max_in_flight < 1 {
            return bad("max_in_flight must be at least 1".into());
        }
        if !self.mock && self.providers.is_empty() {
            return bad("no providers configured (add [[providers]] or use mock mode)".into());
        }
        validate_providers(&self.providers, self.mock).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Providers the run will call. In mock mode every provider is replaced
    /// by a mock one whose model name carries the seed, so that cached mock
    /// answers for different seeds never mix.
    pub fn effective_providers(&self) -> Vec<ProviderConfig> {
        if !self.mock {
            return self.providers.clone();
        }
        let ids: Vec<String> = if self.providers.is_empty() {
            DEFAULT_MOCK_PROVIDERS.iter().map(|s| s.to_string()).collect()
        } else {
            self.providers.iter().map(|p| p.model_id.clone()).collect()
        };
        ids.iter()
            .map(|id| {
                let mut p = ProviderConfig::mock(id);
                p.model_name = format!("mock-seed{}", self.seed);
                p
            })
            .collect()
    }

    pub fn analysis_options(&self) -> AnalysisOptions {
        AnalysisOptions {
            beta: self.beta,
            role_filter: self.role_filter,
            top_n: self.top_n,
        }
    }
}

/// Provider list as read from a standalone TOML file of `[[providers]]`.
pub fn load_providers(path: &Path) -> Result<Vec<ProviderConfig>, PipelineError> {
    #[derive(Deserialize)]
    struct File {
        providers: Vec<ProviderConfig>,
    }
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let f: File = toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    Ok(f.providers)
}

/// Reads and sorts the corpus. An empty corpus is an error.
pub fn load_corpus(path: &Path) -> Result<Vec<Turn>, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::data(Stage::Ingest, format!("{}: {e}", path.display())))?;
    let turns = parse_corpus(BufReader::new(file))
        .map_err(|e| PipelineError::data(Stage::Ingest, format!("{}: {e}", path.display())))?;
    if turns.is_empty() {
        return Err(PipelineError::data(
            Stage::Ingest,
            format!("{}: no turns in input", path.display()),
        ));
    }
    Ok(turns)
}

pub fn segment(turns: &[Turn], gap_minutes: f64) -> Result<Vec<Session>, PipelineError> {
    segment_sessions(turns, gap_minutes).map_err(|e| PipelineError::data(Stage::Segment, e))
}

/// One job per turn, each carrying up to `context_window` preceding turns
/// of the same session.
pub fn build_jobs<'a>(turns: &'a [Turn], sessions: &[Session], context_window: usize) -> Vec<Job<'a>> {
    let by_id: HashMap<&str, &Turn> = turns.iter().map(|t| (t.turn_id.as_str(), t)).collect();
    let mut context: HashMap<&str, Vec<&Turn>> = HashMap::new();
    if context_window > 0 {
        for s in sessions {
            for (i, id) in s.turn_ids.iter().enumerate() {
                let from = i.saturating_sub(context_window);
                let ctx = s.turn_ids[from..i].iter().filter_map(|p| by_id.get(p.as_str()).copied()).collect();
                context.insert(id.as_str(), ctx);
            }
        }
    }
    turns
        .iter()
        .map(|t| Job {
            turn: t,
            context: context.remove(t.turn_id.as_str()).unwrap_or_default(),
        })
        .collect()
}

/// Keeps the first `k_max` ranked emotions.
pub fn truncate_to(mut ann: ModelAnnotation, k_max: usize) -> ModelAnnotation {
    ann.emotions.truncate(k_max);
    ann
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuseOutput {
    pub fused: Vec<FusedAnnotation>,
    /// Turns for which no valid annotation survived.
    pub unfusable: Vec<String>,
}

fn fuse_groups<'a>(groups: impl Iterator<Item = (&'a str, Vec<ModelAnnotation>)>, k_max: usize) -> Result<FuseOutput, PipelineError> {
    let mut out = FuseOutput::default();
    for (turn_id, anns) in groups {
        if anns.is_empty() {
            out.unfusable.push(turn_id.to_string());
            continue;
        }
        let anns: Vec<_> = anns.into_iter().map(|a| truncate_to(a, k_max)).collect();
        match fuse_turn(&anns) {
            Ok(f) => out.fused.push(f),
            Err(FusionError::TurnUnfusable(_)) => out.unfusable.push(turn_id.to_string()),
            Err(e) => return Err(PipelineError::data(Stage::Fuse, format!("turn {turn_id}: {e}"))),
        }
    }
    Ok(out)
}

/// Fuses annotator outcomes; output follows job order.
pub fn fuse_outcomes(jobs: &[Job<'_>], outcomes: Vec<Vec<Outcome>>, k_max: usize) -> Result<FuseOutput, PipelineError> {
    let groups = jobs
        .iter()
        .zip(outcomes)
        .map(|(job, per_model)| (job.turn.turn_id.as_str(), per_model.into_iter().filter_map(Result::ok).collect()));
    fuse_groups(groups, k_max)
}

/// Fuses successful cached answers made with `prompt_hash`, optionally
/// restricted to the given providers (matched by model id and model name).
/// Output is sorted by turn id. Two model names cached under one model id
/// for the same turn is an error unless providers disambiguate.
pub fn fuse_from_cache(
    cache: &AnnotationCache,
    prompt_hash: &str,
    providers: Option<&[ProviderConfig]>,
    k_max: usize,
) -> Result<FuseOutput, PipelineError> {
    let mut by_turn: BTreeMap<String, BTreeMap<String, (String, ModelAnnotation)>> = BTreeMap::new();
    for rec in cache.records() {
        if rec.prompt_hash != prompt_hash || !matches!(rec.status, CacheStatus::Ok { .. }) {
            continue;
        }
        if let Some(ps) = providers {
            if !ps.iter().any(|p| p.model_id == rec.model_id && p.model_name == rec.model_name) {
                continue;
            }
        }
        let ann = rec.annotation().expect("ok record");
        let models = by_turn.entry(rec.turn_id.clone()).or_default();
        if let Some((name, _)) = models.get(&rec.model_id) {
            return Err(PipelineError::data(
                Stage::Fuse,
                format!(
                    "turn {}: model {} cached under both {:?} and {:?}; pass --providers to choose",
                    rec.turn_id, rec.model_id, name, rec.model_name
                ),
            ));
        }
        models.insert(rec.model_id.clone(), (rec.model_name.clone(), ann));
    }
    let groups = by_turn
        .iter()
        .map(|(turn, models)| (turn.as_str(), models.values().map(|(_, a)| a.clone()).collect()));
    fuse_groups(groups, k_max)
}

pub fn write_fused(path: &Path, fused: &[FusedAnnotation]) -> Result<(), PipelineError> {
    let err = |e: std::io::Error| PipelineError::data(Stage::Fuse, format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    for f in fused {
        serde_json::to_writer(&mut w, f).map_err(|e| PipelineError::data(Stage::Fuse, e))?;
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)
}

pub fn read_fused(path: &Path) -> Result<Vec<FusedAnnotation>, PipelineError> {
    let err = |m: String| PipelineError::data(Stage::Analyze, format!("{}: {m}", path.display()));
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FusedAnnotation = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        out.push(f);
    }
    Ok(out)
}

pub fn write_json(path: &Path, value: &impl Serialize, stage: Stage) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::data(stage, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::data(stage, format!("{}: {e}", path.display())))
}

pub fn run_analysis(
    turns: &[Turn],
    sessions: &[Session],
    fused: &[FusedAnnotation],
    options: AnalysisOptions,
) -> Result<AffectAnalysis, PipelineError> {
    analyze(turns, sessions, fused, options).map_err(|e| PipelineError::data(Stage::Analyze, e))
}

/// Writes the CSV reports and the structured analysis into `dir`.
pub fn write_reports(
    dir: &Path,
    turns: &[Turn],
    sessions: &[Session],
    analysis: &AffectAnalysis,
) -> Result<Vec<PathBuf>, PipelineError> {
    let summary = summarize_corpus(turns, sessions).map_err(|e| PipelineError::data(Stage::Report, e))?;
    let mut written = emit_reports(dir, analysis, &summary).map_err(|e| PipelineError::data(Stage::Report, e))?;
    let json_path = dir.join(ANALYSIS_FILE);
    write_json(&json_path, &analysis_json(analysis), Stage::Report)?;
    written.push(json_path);
    Ok(written)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub turns: u64,
    pub participants: u64,
    pub sessions: u64,
    pub annotation_requests: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
    pub annotations_ok: u64,
    pub annotations_failed: u64,
    pub responses_truncated: u64,
    pub fused_turns: u64,
    pub unfusable_turns: u64,
    pub analyzed_turns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSnapshot {
    pub model_id: String,
    pub model_name: String,
    pub endpoint: String,
}

/// Written next to the outputs of every completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub prompt_version: String,
    pub prompt_hash: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub config: PipelineConfig,
    pub providers: Vec<ProviderSnapshot>,
    pub counts: RunCounts,
    pub outputs: Vec<String>,
}

/// Runs every stage with the backend implied by the config: the mock
/// backend in mock mode, HTTP otherwise.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    config.validate()?;
    if config.mock {
        run_pipeline_with(config, MockBackend::new(config.seed), Backoff::NONE)
    } else {
        let backend =
            HttpBackend::from_env(&config.providers).map_err(|e| PipelineError::Provider(e.to_string()))?;
        run_pipeline_with(config, backend, Backoff::default())
    }
}

/// Like [`run_pipeline`] with an explicit backend.
pub fn run_pipeline_with<B: Backend>(
    config: &PipelineConfig,
    backend: B,
    backoff: Backoff,
) -> Result<RunManifest, PipelineError> {
    config.validate()?;
    let started_at = Utc::now();
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::data(Stage::Report, format!("{}: {e}", out.display())))?;
    let marker = out.join(IN_PROGRESS_FILE);
    fs::write(&marker, started_at.to_rfc3339())
        .map_err(|e| PipelineError::data(Stage::Report, format!("{}: {e}", marker.display())))?;

    let turns = load_corpus(&config.input)?;
    let sessions = segment(&turns, config.session_gap_minutes)?;
    log::info!("ingested {} turns in {} sessions", turns.len(), sessions.len());

    let providers = config.effective_providers();
    let cache = AnnotationCache::open(&config.cache_dir).map_err(|e| PipelineError::data(Stage::Annotate, e))?;
    let annotator = Annotator::new(backend, cache, providers.clone())
        .with_backoff(backoff)
        .with_context_window(config.context_window)
        .with_retry_failed(config.retry_failed)
        .with_max_in_flight(config.max_in_flight);
    let jobs = build_jobs(&turns, &sessions, config.context_window);
    let outcomes = annotator.annotate_all(&jobs);
    let stats: AnnotationStats = annotator.stats();
    log::info!(
        "annotated: {} requested, {} cache hits, {} calls, {} failed",
        stats.requested,
        stats.cache_hits,
        stats.provider_calls,
        stats.failed
    );

    let fuse = fuse_outcomes(&jobs, outcomes, config.k_max)?;
    if fuse.fused.is_empty() {
        return Err(PipelineError::Provider(format!(
            "no turn received a valid annotation ({} failures)",
            stats.failed
        )));
    }
    if !fuse.unfusable.is_empty() {
        log::warn!("{} turns could not be fused", fuse.unfusable.len());
    }
    let fused_path = out.join(FUSED_FILE);
    write_fused(&fused_path, &fuse.fused)?;

    let analysis = run_analysis(&turns, &sessions, &fuse.fused, config.analysis_options())?;
    let mut outputs = vec![fused_path];
    outputs.extend(write_reports(out, &turns, &sessions, &analysis)?);

    let participants = {
        let mut ids: Vec<&str> = turns.iter().map(|t| t.participant_id.as_str()).collect();
        ids.dedup();
        ids.len() as u64
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        prompt_version: PROMPT_VERSION.to_string(),
        prompt_hash: annotator.prompt_hash().to_string(),
        started_at,
        finished_at: Utc::now(),
        config: config.clone(),
        providers: providers
            .iter()
            .map(|p| ProviderSnapshot {
                model_id: p.model_id.clone(),
                model_name: p.model_name.clone(),
                endpoint: p.endpoint.clone(),
            })
            .collect(),
        counts: RunCounts {
            turns: turns.len() as u64,
            participants,
            sessions: sessions.len() as u64,
            annotation_requests: stats.requested,
            cache_hits: stats.cache_hits,
            provider_calls: stats.provider_calls,
            annotations_ok: stats.succeeded,
            annotations_failed: stats.failed,
            responses_truncated: stats.truncated,
            fused_turns: fuse.fused.len() as u64,
            unfusable_turns: fuse.unfusable.len() as u64,
            analyzed_turns: analysis.turns_analyzed,
        },
        outputs: outputs
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest, Stage::Report)?;
    fs::remove_file(&marker).map_err(|e| PipelineError::data(Stage::Report, format!("{}: {e}", marker.display())))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::prompt_hash;

    const CORPUS: &str = r#"{"turn_id":"a1","participant_id":"p1","timestamp":"2024-03-01T10:00:00Z","role":"student","text":"why does my loop not stop"}
{"turn_id":"a2","participant_id":"p1","timestamp":"2024-03-01T10:01:00Z","role":"tutor","text":"check the condition"}
{"turn_id":"a3","participant_id":"p1","timestamp":"2024-03-01T10:02:00Z","role":"student","text":"ok it works now"}
{"turn_id":"a4","participant_id":"p1","timestamp":"2024-03-01T12:00:00Z","role":"student","text":"new question about lists"}
{"turn_id":"b1","participant_id":"p2","timestamp":"2024-03-02T09:00:00Z","role":"student","text":"I am lost"}
{"turn_id":"b2","participant_id":"p2","timestamp":"2024-03-02T09:05:00Z","role":"student","text":"still lost"}
"#;

    fn setup() -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("corpus.jsonl");
        fs::write(&input, CORPUS).unwrap();
        let mut cfg = PipelineConfig::new(input, dir.path().join("cache"), dir.path().join("out"));
        cfg.mock = true;
        cfg.seed = 3;
        (dir, cfg)
    }

    #[test]
    fn toml_config_defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            r#"
input = "data/corpus.jsonl"
cache_dir = "cache"
output_dir = "/abs/out"
role_filter = "all"

[[providers]]
model_id = "gpt"
endpoint = "https://example.com/v1/chat/completions"
model_name = "gpt-4o-mini"
credential = "${OPENAI_API_KEY}"
"#,
        )
        .unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.input, dir.path().join("data/corpus.jsonl"));
        assert_eq!(cfg.output_dir, PathBuf::from("/abs/out"));
        assert_eq!(cfg.k_max, 5);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.session_gap_minutes, 60.0);
        assert_eq!(cfg.role_filter, RoleFilter::All);
        assert_eq!(cfg.providers[0].max_retries, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = PipelineConfig::new("a", "b", "c");
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        cfg.mock = true;
        cfg.validate().unwrap();
        cfg.k_max = 6;
        assert!(cfg.validate().is_err());
        cfg.k_max = 5;
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        assert!(PipelineConfig::from_toml_str("input = 1").is_err());
    }

    #[test]
    fn mock_model_names_carry_seed() {
        let mut cfg = PipelineConfig::new("a", "b", "c");
        cfg.mock = true;
        cfg.seed = 9;
        let ps = cfg.effective_providers();
        assert_eq!(ps.len(), 3);
        assert!(ps.iter().all(|p| p.model_name == "mock-seed9"));
    }

    #[test]
    fn context_jobs_stay_within_session() {
        let turns = crate::corpus::parse_corpus_str(CORPUS).unwrap();
        let sessions = segment(&turns, 60.0).unwrap();
        let jobs = build_jobs(&turns, &sessions, 2);
        let ctx = |id: &str| -> Vec<&str> {
            let j = jobs.iter().find(|j| j.turn.turn_id == id).unwrap();
            j.context.iter().map(|t| t.turn_id.as_str()).collect()
        };
        assert_eq!(ctx("a1"), Vec::<&str>::new());
        assert_eq!(ctx("a3"), vec!["a1", "a2"]);
        assert_eq!(ctx("a4"), Vec::<&str>::new());
        assert_eq!(ctx("b2"), vec!["b1"]);
    }

    #[test]
    fn full_run_then_warm_rerun() {
        let (_dir, cfg) = setup();
        let m1 = run_pipeline(&cfg).unwrap();
        assert_eq!(m1.counts.turns, 6);
        assert_eq!(m1.counts.sessions, 3);
        assert_eq!(m1.counts.provider_calls, 18);
        assert_eq!(m1.counts.fused_turns, 6);
        assert!(!cfg.output_dir.join(IN_PROGRESS_FILE).exists());
        let fused1 = fs::read(cfg.output_dir.join(FUSED_FILE)).unwrap();

        let m2 = run_pipeline(&cfg).unwrap();
        assert_eq!(m2.counts.provider_calls, 0);
        assert_eq!(m2.counts.cache_hits, 18);
        assert_eq!(fs::read(cfg.output_dir.join(FUSED_FILE)).unwrap(), fused1);

        let cache = AnnotationCache::open(&cfg.cache_dir).unwrap();
        let from_cache = fuse_from_cache(&cache, &prompt_hash(0), None, 5).unwrap();
        let mut expected = read_fused(&cfg.output_dir.join(FUSED_FILE)).unwrap();
        expected.sort_by(|a, b| a.turn_id.cmp(&b.turn_id));
        assert_eq!(from_cache.fused, expected);
    }

    #[test]
    fn empty_input_fails_before_any_call() {
        let (_dir, cfg) = setup();
        fs::write(&cfg.input, "\n\n").unwrap();
        let backend = MockBackend::new(0);
        let err = run_pipeline_with(&cfg, &backend, Backoff::NONE).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().starts_with("ingest:"), "{err}");
        assert_eq!(backend.calls(), 0);
        assert!(cfg.output_dir.join(IN_PROGRESS_FILE).exists());
    }

    #[test]
    fn ambiguous_cache_needs_provider_filter() {
        let (_dir, mut cfg) = setup();
        run_pipeline(&cfg).unwrap();
        cfg.seed = 4;
        run_pipeline(&cfg).unwrap();
        let cache = AnnotationCache::open(&cfg.cache_dir).unwrap();
        assert!(fuse_from_cache(&cache, &prompt_hash(0), None, 5).is_err());
        let ps = cfg.effective_providers();
        let out = fuse_from_cache(&cache, &prompt_hash(0), Some(&ps), 5).unwrap();
        assert_eq!(out.fused.len(), 6);
    }

    #[test]
    fn k_max_truncates_before_fusion() {
        let (_dir, mut cfg) = setup();
        cfg.k_max = 1;
        run_pipeline(&cfg).unwrap();
        for f in read_fused(&cfg.output_dir.join(FUSED_FILE)).unwrap() {
            assert!(f.label_votes.values().all(|&v| v >= 1));
            assert!(f.label_votes.values().sum::<u32>() as usize == f.contributing_models.len());
        }
    }
}
