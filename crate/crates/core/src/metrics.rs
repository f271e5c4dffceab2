//! Global and local log-probability scores.
//!
//! The global score of a response is the token-mean log-probability of the
//! whole response after the prompt. The local score is the unweighted mean,
//! over the response's steps, of each step's token-mean log-probability when
//! the step is scored after the prompt and a bounded window of the steps
//! immediately preceding it.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    CandidateKey, CandidateResponse, PromptRecord, ScoreRecord, Step, WindowPolicy,
};
use crate::numeric::mean;
use crate::scorer::{token_logprobs, ScoreError, Scorer, TokenScores};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid scoring job: {0}")]
    InvalidJob(String),
    #[error("candidate {0} refers to an unknown prompt")]
    MissingPrompt(CandidateKey),
    #[error("candidate {0} has not been segmented")]
    NotSegmented(CandidateKey),
    #[error("response has no steps")]
    NoSteps,
    #[error("scoring candidate {key} failed: {source}")]
    Candidate {
        key: CandidateKey,
        #[source]
        source: ScoreError,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

impl MetricsError {
    pub fn score_error(&self) -> Option<&ScoreError> {
        match self {
            MetricsError::Candidate { source, .. } | MetricsError::Score(source) => Some(source),
            _ => None,
        }
    }
}

/// How contexts are built and how much parallelism to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringJob {
    pub window_policy: WindowPolicy,
    /// Keep the prompt in every step's context. When false the prompt is
    /// only included while the window still reaches back to the first step.
    pub include_prompt: bool,
    pub parallelism: usize,
    /// Inserted between the prompt and the response.
    pub separator: String,
    /// Optional wrapper with a `{prompt}` placeholder, e.g. a chat template.
    pub prompt_template: Option<String>,
}

impl Default for ScoringJob {
    fn default() -> Self {
        Self {
            window_policy: WindowPolicy::default(),
            include_prompt: true,
            parallelism: 1,
            separator: "\n".to_string(),
            prompt_template: None,
        }
    }
}

impl ScoringJob {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.parallelism == 0 {
            return Err(MetricsError::InvalidJob(
                "parallelism must be at least 1".into(),
            ));
        }
        self.window_policy
            .validate()
            .map_err(MetricsError::InvalidJob)?;
        if let Some(t) = &self.prompt_template {
            if !t.contains("{prompt}") {
                return Err(MetricsError::InvalidJob(
                    "prompt_template must contain a {prompt} placeholder".into(),
                ));
            }
        }
        Ok(())
    }

    /// The prompt as it appears at the start of every context.
    pub fn prompt_prefix(&self, prompt: &PromptRecord) -> String {
        let rendered = match &self.prompt_template {
            Some(t) => t.replace("{prompt}", &prompt.text),
            None => prompt.text.clone(),
        };
        rendered + &self.separator
    }
}

/// Context for the 1-based step `i`: prompt prefix plus the window of
/// preceding steps, concatenated byte-exactly.
pub fn step_context(
    job: &ScoringJob,
    prompt_prefix: &str,
    steps: &[Step],
    i: usize,
    policy: &WindowPolicy,
) -> String {
    let k = policy.window_len(i);
    let window = &steps[i - 1 - k..i - 1];
    let with_prompt = job.include_prompt || k == i - 1;
    let mut ctx = String::new();
    if with_prompt {
        ctx.push_str(prompt_prefix);
    }
    for s in window {
        ctx.push_str(&s.text);
    }
    ctx
}

/// Per-token log-probabilities of the whole response after the prompt.
pub fn global_token_scores(
    scorer: &dyn Scorer,
    job: &ScoringJob,
    prompt: &PromptRecord,
    response: &str,
) -> Result<TokenScores, MetricsError> {
    Ok(token_logprobs(
        scorer,
        &job.prompt_prefix(prompt),
        response,
    )?)
}

/// Token-mean log-probability of `response` given `prompt` (nats/token).
pub fn global_logprob(
    scorer: &dyn Scorer,
    job: &ScoringJob,
    prompt: &PromptRecord,
    response: &str,
) -> Result<f64, MetricsError> {
    Ok(global_token_scores(scorer, job, prompt, response)?.mean())
}

/// Per-token log-probabilities of each step under its window.
pub fn step_token_scores(
    scorer: &dyn Scorer,
    job: &ScoringJob,
    prompt: &PromptRecord,
    steps: &[Step],
    policy: &WindowPolicy,
) -> Result<Vec<TokenScores>, MetricsError> {
    if steps.is_empty() {
        return Err(MetricsError::NoSteps);
    }
    let prefix = job.prompt_prefix(prompt);
    (1..=steps.len())
        .map(|i| {
            let ctx = step_context(job, &prefix, steps, i, policy);
            Ok(token_logprobs(scorer, &ctx, &steps[i - 1].text)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalScore {
    pub local_lp: f64,
    pub step_lps: Vec<f64>,
    pub step_token_counts: Vec<usize>,
}

/// Mean over steps of each step's token-mean log-probability.
pub fn local_logprob(
    scorer: &dyn Scorer,
    job: &ScoringJob,
    prompt: &PromptRecord,
    steps: &[Step],
    policy: &WindowPolicy,
) -> Result<LocalScore, MetricsError> {
    let per_step = step_token_scores(scorer, job, prompt, steps, policy)?;
    let step_lps: Vec<f64> = per_step.iter().map(TokenScores::mean).collect();
    Ok(LocalScore {
        local_lp: mean(&step_lps),
        step_token_counts: per_step.iter().map(TokenScores::token_count).collect(),
        step_lps,
    })
}

fn score_candidate(
    scorer: &dyn Scorer,
    job: &ScoringJob,
    prompt: &PromptRecord,
    candidate: &CandidateResponse,
) -> Result<ScoreRecord, MetricsError> {
    let wrap = |e: MetricsError| match e {
        MetricsError::Score(source) => MetricsError::Candidate {
            key: candidate.key(),
            source,
        },
        other => other,
    };
    let global = global_token_scores(scorer, job, prompt, &candidate.text).map_err(wrap)?;
    let local =
        local_logprob(scorer, job, prompt, &candidate.steps, &job.window_policy).map_err(wrap)?;
    Ok(ScoreRecord {
        prompt_id: candidate.prompt_id.clone(),
        teacher_id: candidate.teacher_id.clone(),
        candidate_index: candidate.candidate_index,
        scorer_id: scorer.scorer_id().to_string(),
        token_count: global.token_count(),
        global_lp: global.mean(),
        step_lps: local.step_lps,
        step_token_counts: local.step_token_counts,
        local_lp: local.local_lp,
        window_policy: job.window_policy,
    })
}

/// Scores every candidate, in input order, with `job.parallelism` workers.
///
/// The first scorer error aborts the run. Work already written to a cache
/// behind `scorer` is kept, so a rerun resumes where this one stopped.
pub fn score_dataset(
    prompts: &[PromptRecord],
    candidates: &[CandidateResponse],
    scorer: &dyn Scorer,
    job: &ScoringJob,
) -> Result<Vec<ScoreRecord>, MetricsError> {
    job.validate()?;
    let by_id: HashMap<&str, &PromptRecord> =
        prompts.iter().map(|p| (p.prompt_id.as_str(), p)).collect();
    let mut work = Vec::with_capacity(candidates.len());
    for c in candidates {
        let prompt = by_id
            .get(c.prompt_id.as_str())
            .ok_or_else(|| MetricsError::MissingPrompt(c.key()))?;
        if !c.is_segmented() {
            return Err(MetricsError::NotSegmented(c.key()));
        }
        work.push((*prompt, c));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.parallelism)
        .build()
        .map_err(|e| MetricsError::InvalidJob(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        work.par_iter()
            .map(|(prompt, c)| score_candidate(scorer, job, prompt, c))
            .collect()
    })
}

/// Fractions of preceding steps compared in the window ablation.
pub const DEFAULT_ABLATION_FRACTIONS: [f64; 4] = [0.05, 0.25, 0.50, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub teacher_id: String,
    pub mean_local_lp: f64,
    /// Mean over candidates of the token-weighted step aggregate.
    pub mean_token_weighted_lp: f64,
    pub n_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherGlobalMean {
    pub teacher_id: String,
    pub mean_global_lp: f64,
    pub n_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowAblation {
    pub rows: Vec<AblationRow>,
    pub global: Vec<TeacherGlobalMean>,
}

impl WindowAblation {
    /// CSV with header `window,teacher_id,mean_local_lp,mean_token_weighted_lp,mean_global_lp,n_candidates`.
    /// Fraction rows leave `mean_global_lp` empty; the `global` rows leave
    /// the local columns empty.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record([
            "window",
            "teacher_id",
            "mean_local_lp",
            "mean_token_weighted_lp",
            "mean_global_lp",
            "n_candidates",
        ])?;
        for r in &self.rows {
            w.write_record([
                format!("fraction:{}", r.fraction),
                r.teacher_id.clone(),
                r.mean_local_lp.to_string(),
                r.mean_token_weighted_lp.to_string(),
                String::new(),
                r.n_candidates.to_string(),
            ])?;
        }
        for g in &self.global {
            w.write_record([
                "global".to_string(),
                g.teacher_id.clone(),
                String::new(),
                String::new(),
                g.mean_global_lp.to_string(),
                g.n_candidates.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Per-teacher mean local score for each window fraction, next to the
/// per-teacher mean global score.
pub fn window_ablation(
    prompts: &[PromptRecord],
    candidates: &[CandidateResponse],
    scorer: &dyn Scorer,
    job: &ScoringJob,
    fractions: &[f64],
) -> Result<WindowAblation, MetricsError> {
    if fractions.is_empty() {
        return Err(MetricsError::InvalidJob("no window fractions given".into()));
    }
    let mut rows = Vec::new();
    let mut global = Vec::new();
    for (n, &fraction) in fractions.iter().enumerate() {
        let job = ScoringJob {
            window_policy: WindowPolicy::Fraction { fraction },
            ..job.clone()
        };
        let records = score_dataset(prompts, candidates, scorer, &job)?;
        let mut by_teacher: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
        for r in &records {
            by_teacher.entry(r.teacher_id.as_str()).or_default().push(r);
        }
        for (teacher, recs) in &by_teacher {
            let locals: Vec<f64> = recs.iter().map(|r| r.local_lp).collect();
            let weighted: Vec<f64> = recs.iter().map(|r| r.token_weighted_lp()).collect();
            rows.push(AblationRow {
                fraction,
                teacher_id: teacher.to_string(),
                mean_local_lp: mean(&locals),
                mean_token_weighted_lp: mean(&weighted),
                n_candidates: recs.len(),
            });
            if n == 0 {
                let globals: Vec<f64> = recs.iter().map(|r| r.global_lp).collect();
                global.push(TeacherGlobalMean {
                    teacher_id: teacher.to_string(),
                    mean_global_lp: mean(&globals),
                    n_candidates: recs.len(),
                });
            }
        }
    }
    Ok(WindowAblation { rows, global })
}
