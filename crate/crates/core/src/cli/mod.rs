//! The `natsel` command line.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or input
//! validation errors, 2 for failures while running (scoring backend,
//! transport, writing outputs).

mod config;
mod output;

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::{RunConfig, ScorerSource};
pub use output::{manifest_path, DirLock, FileDigest, Manifest, LOCK_FILE};

use crate::corpus::{
    load_candidates, load_jsonl, load_prompts, load_scores, write_jsonl_to, CandidateResponse,
    JsonlRecord, ScoreCache,
};
use crate::curation::{self, SelectionRecord};
use crate::metrics::{self, ScoringJob, DEFAULT_ABLATION_FRACTIONS};
use crate::scorer::{train_reference_lm, CachingScorer, Scorer};
use crate::segmenter::{segment_candidate, SegmenterConfig};

#[derive(Debug, Parser)]
#[command(
    name = "natsel",
    version,
    about = "Select teacher responses by how natural they are to a student model"
)]
struct Cli {
    /// JSON run configuration; flags and NATSEL_* variables override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split candidate responses into sentence steps.
    Segment(SegmentArgs),
    /// Compute global and local scores for every candidate.
    Score(ScoreArgs),
    /// Pick responses per prompt from a score table.
    Select(SelectArgs),
    /// Rank teachers by mean local score.
    RankTeachers(RankArgs),
    /// Compare local scores across window fractions.
    AblateWindow(AblateArgs),
    /// Keep candidates whose final answer matches the ground truth.
    FilterCorrect(FilterArgs),
    /// Summaries of a selection.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Write the selected pairs as a fine-tuning dataset.
    EmitSft(EmitSftArgs),
    /// Train a character n-gram reference model.
    TrainLm(TrainLmArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Candidates JSONL.
    #[arg(long = "in", value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Do not split at blank lines.
    #[arg(long)]
    no_blank_line_split: bool,
    /// Allow splits inside $...$ spans.
    #[arg(long)]
    no_math_protect: bool,
}

#[derive(Debug, Args)]
struct ScoringArgs {
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Scorer JSON file.
    #[arg(long)]
    scorer: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: ScoringArgs,
    /// fixed:K, fraction:F or full.
    #[arg(long)]
    window: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: ScoringArgs,
    /// Comma-separated window fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    /// Required for the random strategy.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Rank on this many prompts drawn at random.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ReportCommand {
    /// Share of selections per teacher.
    Composition {
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EmitSftArgs {
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainLmArgs {
    /// Plain-text training corpus, one line per sequence.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long)]
    out: PathBuf,
}

/// A failed run: message for stderr and the exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Display> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 2,
            message: e.to_string(),
        })
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_env(args, |k| std::env::var(k).ok())
}

/// As [`run`], reading `NATSEL_*` overrides through `env`.
pub fn run_with_env<I, T>(args: I, env: impl Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli, &env) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn execute(cli: Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p).invalid()?,
        None => RunConfig::default(),
    };
    let global_flags = RunConfig {
        log_level: cli.log_level.clone(),
        ..RunConfig::default()
    };
    let env_layer = RunConfig::from_env(env).invalid()?;
    let resolve = |flags: RunConfig| {
        file.clone()
            .overlay(global_flags.clone())
            .overlay(flags)
            .overlay(env_layer.clone())
    };

    let level = resolve(RunConfig::default()).log_filter().invalid()?;
    let _ = env_logger::Builder::new().filter_level(level).try_init();

    match cli.command {
        Command::Segment(a) => {
            let cfg = resolve(RunConfig {
                candidates: a.input.clone(),
                ..RunConfig::default()
            });
            cmd_segment(&cfg, &a)
        }
        Command::Score(a) => {
            let mut flags = a.common.layer();
            flags.window = a.window.clone();
            cmd_score(&resolve(flags), a.common.out.as_deref())
        }
        Command::AblateWindow(a) => cmd_ablate(&resolve(a.common.layer()), &a),
        Command::Select(a) => {
            let cfg = resolve(RunConfig {
                strategy: a.strategy.clone(),
                seed: a.seed,
                ..RunConfig::default()
            });
            cmd_select(&cfg, &a)
        }
        Command::RankTeachers(a) => {
            let cfg = resolve(RunConfig {
                seed: a.seed,
                ..RunConfig::default()
            });
            cmd_rank(&cfg, &a)
        }
        Command::FilterCorrect(a) => {
            let cfg = resolve(RunConfig {
                prompts: a.prompts.clone(),
                candidates: a.candidates.clone(),
                ..RunConfig::default()
            });
            cmd_filter(&cfg, a.out.as_deref())
        }
        Command::Report(ReportCommand::Composition { selection, out }) => {
            cmd_composition(&resolve(RunConfig::default()), &selection, out.as_deref())
        }
        Command::EmitSft(a) => {
            let cfg = resolve(RunConfig {
                prompts: a.prompts.clone(),
                candidates: a.candidates.clone(),
                ..RunConfig::default()
            });
            cmd_emit_sft(&cfg, &a)
        }
        Command::TrainLm(a) => cmd_train_lm(&a),
        Command::Version => {
            println!("natsel {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

impl ScoringArgs {
    fn layer(&self) -> RunConfig {
        RunConfig {
            prompts: self.prompts.clone(),
            candidates: self.candidates.clone(),
            cache_dir: self.cache_dir.clone(),
            scorer: self.scorer.clone().map(ScorerSource::Path),
            parallelism: self.parallelism,
            ..RunConfig::default()
        }
    }
}

/// Destination for one command's main output.
enum Sink {
    File { path: PathBuf, _lock: DirLock },
    Stdout,
}

impl Sink {
    fn open(path: Option<PathBuf>) -> Result<Self, Failure> {
        match path {
            Some(path) => {
                let dir = match path.parent() {
                    Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
                    _ => PathBuf::from("."),
                };
                let lock = DirLock::acquire(&dir).runtime()?;
                Ok(Sink::File { path, _lock: lock })
            }
            None => Ok(Sink::Stdout),
        }
    }

    fn required(path: Option<PathBuf>) -> Result<Self, Failure> {
        match path {
            Some(_) => Self::open(path),
            None => Err("an output path is required (--out or output_dir)").invalid(),
        }
    }

    /// Writes the output and, for files, its manifest.
    fn finish(self, bytes: &[u8], manifest: &mut Manifest) -> Result<(), Failure> {
        match self {
            Sink::File { path, _lock } => {
                output::write_with_manifest(&path, bytes, manifest)
                    .map_err(|e| format!("writing {}: {e}", path.display()))
                    .runtime()?;
                log::info!("wrote {}", path.display());
                Ok(())
            }
            Sink::Stdout => std::io::stdout().write_all(bytes).runtime(),
        }
    }
}

fn jsonl_bytes<T: JsonlRecord>(records: &[T]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_jsonl_to(records, &mut buf).runtime()?;
    Ok(buf)
}

fn load_selection(path: &Path) -> Result<Vec<SelectionRecord>, Failure> {
    Ok(load_jsonl::<SelectionRecord>(path)
        .invalid()?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

fn digest(manifest: &mut Manifest, role: &str, path: &Path) -> Result<(), Failure> {
    manifest
        .input(role, path)
        .map_err(|e| format!("hashing {}: {e}", path.display()))
        .invalid()
}

fn cmd_segment(cfg: &RunConfig, a: &SegmentArgs) -> Result<(), Failure> {
    let input = cfg.require_candidates().invalid()?.to_path_buf();
    let seg = SegmenterConfig {
        split_on_blank_line: !a.no_blank_line_split,
        protect_math_spans: !a.no_math_protect,
        ..SegmenterConfig::default()
    };
    let sink = Sink::required(cfg.output_path(a.out.as_deref(), "segmented.jsonl"))?;
    let mut candidates = load_candidates(&input).invalid()?;
    for c in &mut candidates {
        segment_candidate(c, &seg)
            .map_err(|e| format!("candidate {}: {e}", c.key()))
            .invalid()?;
    }
    let mut manifest = Manifest::new("segment", json!({ "segmenter": seg }));
    digest(&mut manifest, "candidates", &input)?;
    sink.finish(&jsonl_bytes(&candidates)?, &mut manifest)
}

/// Everything needed to score, validated before any scoring starts.
struct ScoringSetup {
    job: ScoringJob,
    prompts: Vec<crate::corpus::PromptRecord>,
    candidates: Vec<CandidateResponse>,
    scorer: CachingScorer<std::sync::Arc<dyn Scorer>>,
    manifest: Manifest,
}

fn scoring_setup(cfg: &RunConfig, command: &str) -> Result<ScoringSetup, Failure> {
    let job = ScoringJob {
        window_policy: cfg.window_policy().invalid()?,
        include_prompt: cfg.include_prompt.unwrap_or(true),
        parallelism: cfg.parallelism.unwrap_or(1),
        prompt_template: cfg.prompt_template.clone(),
        ..ScoringJob::default()
    };
    job.validate().invalid()?;
    let scorer_ref = cfg.scorer_ref().invalid()?;
    let prompts_path = cfg.require_prompts().invalid()?;
    let candidates_path = cfg.require_candidates().invalid()?;
    let prompts = load_prompts(prompts_path).invalid()?;
    let mut candidates = load_candidates(candidates_path).invalid()?;
    let seg = SegmenterConfig::default();
    for c in candidates.iter_mut().filter(|c| !c.is_segmented()) {
        segment_candidate(c, &seg)
            .map_err(|e| format!("candidate {}: {e}", c.key()))
            .invalid()?;
    }
    let backend = scorer_ref.open().invalid()?;
    let cache = match &cfg.cache_dir {
        Some(dir) => Some(ScoreCache::open(dir).runtime()?),
        None => None,
    };

    let mut manifest = Manifest::new(
        command,
        json!({
            "scorer": scorer_ref,
            "window_policy": job.window_policy,
            "include_prompt": job.include_prompt,
            "separator": job.separator,
            "prompt_template": job.prompt_template,
            "parallelism": job.parallelism,
        }),
    );
    manifest.scorer_id = Some(scorer_ref.scorer_id.clone());
    digest(&mut manifest, "prompts", prompts_path)?;
    digest(&mut manifest, "candidates", candidates_path)?;
    Ok(ScoringSetup {
        job,
        prompts,
        candidates,
        scorer: CachingScorer::new(backend, cache),
        manifest,
    })
}

fn cmd_score(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let sink = Sink::required(cfg.output_path(out, "scores.jsonl"))?;
    let mut s = scoring_setup(cfg, "score")?;
    let scores = metrics::score_dataset(&s.prompts, &s.candidates, &s.scorer, &s.job).runtime()?;
    let stats = s.scorer.stats();
    log::info!(
        "scored {} candidates ({} cache hits, {} backend calls)",
        scores.len(),
        stats.hits,
        stats.misses
    );
    sink.finish(&jsonl_bytes(&scores)?, &mut s.manifest)
}

fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<(), Failure> {
    let fractions = if a.fractions.is_empty() {
        DEFAULT_ABLATION_FRACTIONS.to_vec()
    } else {
        a.fractions.clone()
    };
    if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(format!("window fraction {bad} is outside (0, 1]")).invalid();
    }
    let sink = Sink::open(cfg.output_path(a.common.out.as_deref(), "window_ablation.csv"))?;
    let mut s = scoring_setup(cfg, "ablate-window")?;
    if let serde_json::Value::Object(m) = &mut s.manifest.config {
        m.insert("fractions".into(), json!(fractions));
    }
    let ablation =
        metrics::window_ablation(&s.prompts, &s.candidates, &s.scorer, &s.job, &fractions)
            .runtime()?;
    sink.finish(ablation.to_csv().runtime()?.as_bytes(), &mut s.manifest)
}

fn cmd_select(cfg: &RunConfig, a: &SelectArgs) -> Result<(), Failure> {
    let strategy = cfg.selection_strategy().invalid()?;
    let sink = Sink::open(cfg.output_path(a.out.as_deref(), "selection.jsonl"))?;
    let scores = load_scores(&a.scores).invalid()?;
    let selection = curation::select(&scores, strategy).invalid()?;
    let mut manifest = Manifest::new("select", json!({ "strategy": strategy }));
    manifest.scorer_id = scores.first().map(|r| r.scorer_id.clone());
    digest(&mut manifest, "scores", &a.scores)?;
    sink.finish(&jsonl_bytes(&selection)?, &mut manifest)
}

fn cmd_rank(cfg: &RunConfig, a: &RankArgs) -> Result<(), Failure> {
    let seed = match (a.subset, cfg.seed) {
        (Some(_), None) => return Err("--subset requires a seed").invalid(),
        (_, seed) => seed,
    };
    let sink = Sink::open(cfg.output_path(a.out.as_deref(), "teacher_ranking.csv"))?;
    let scores = load_scores(&a.scores).invalid()?;
    let ranking = match a.subset {
        Some(n) => curation::rank_teachers_subset(&scores, n, seed.expect("checked above")),
        None => curation::rank_teachers(&scores),
    }
    .invalid()?;
    for e in &ranking.entries {
        log::info!(
            "{} {} local {:.6} global {:.6}",
            e.rank,
            e.teacher_id,
            e.mean_local_lp,
            e.mean_global_lp
        );
    }
    let mut manifest = Manifest::new("rank-teachers", json!({ "subset": a.subset, "seed": seed }));
    manifest.scorer_id = scores.first().map(|r| r.scorer_id.clone());
    manifest.subset_prompt_ids = ranking.subset_prompt_ids.clone();
    digest(&mut manifest, "scores", &a.scores)?;
    sink.finish(ranking.to_csv().runtime()?.as_bytes(), &mut manifest)
}

fn cmd_filter(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let prompts_path = cfg.require_prompts().invalid()?;
    let candidates_path = cfg.require_candidates().invalid()?;
    let sink = Sink::open(cfg.output_path(out, "filtered.jsonl"))?;
    let prompts = load_prompts(prompts_path).invalid()?;
    let candidates = load_candidates(candidates_path).invalid()?;
    let kept = curation::filter_correct(&candidates, &prompts);
    log::info!("kept {} of {} candidates", kept.len(), candidates.len());
    let mut manifest = Manifest::new("filter-correct", json!({}));
    digest(&mut manifest, "prompts", prompts_path)?;
    digest(&mut manifest, "candidates", candidates_path)?;
    sink.finish(&jsonl_bytes(&kept)?, &mut manifest)
}

fn cmd_composition(
    cfg: &RunConfig,
    selection_path: &Path,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let sink = Sink::open(cfg.output_path(out, "composition.csv"))?;
    let selection = load_selection(selection_path)?;
    let rows = curation::composition_report(&selection).invalid()?;
    let mut manifest = Manifest::new(
        "report composition",
        json!({ "strategy": selection[0].strategy }),
    );
    digest(&mut manifest, "selection", selection_path)?;
    sink.finish(
        curation::composition_csv(&rows).runtime()?.as_bytes(),
        &mut manifest,
    )
}

fn cmd_emit_sft(cfg: &RunConfig, a: &EmitSftArgs) -> Result<(), Failure> {
    let prompts_path = cfg.require_prompts().invalid()?;
    let candidates_path = cfg.require_candidates().invalid()?;
    let sink = Sink::required(cfg.output_path(a.out.as_deref(), "sft.jsonl"))?;
    let selection = load_selection(&a.selection)?;
    let prompts = load_prompts(prompts_path).invalid()?;
    let candidates = load_candidates(candidates_path).invalid()?;
    let records = curation::build_sft_records(&selection, &prompts, &candidates).invalid()?;
    let mut manifest = Manifest::new("emit-sft", json!({}));
    digest(&mut manifest, "selection", &a.selection)?;
    digest(&mut manifest, "prompts", prompts_path)?;
    digest(&mut manifest, "candidates", candidates_path)?;
    sink.finish(&jsonl_bytes(&records)?, &mut manifest)
}

fn cmd_train_lm(a: &TrainLmArgs) -> Result<(), Failure> {
    let sink = Sink::required(Some(a.out.clone()))?;
    let lm = train_reference_lm(&a.corpus, a.order).invalid()?;
    let mut manifest = Manifest::new("train-lm", json!({ "order": a.order }));
    manifest.scorer_id = Some(lm.scorer_id().to_string());
    digest(&mut manifest, "corpus", &a.corpus)?;
    sink.finish(&lm.to_json_bytes(), &mut manifest)
}
