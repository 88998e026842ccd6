//! Dataset loading, seeded sampling, evaluation runs and ablation grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendSource, BackendSpec};
use crate::collab::{run_session, write_transcript, SessionError};
use crate::domain::{EventKind, ImageAttachment, Label, ModalityClass, Question, SessionTranscript, TeamworkConfig};
use crate::recruit::{recruit, MAX_TEAM, MIN_TEAM};
use crate::rng::partial_shuffle;
use crate::teamwork::{orientation_metric, resolution_rate};
use crate::templates::{TemplateError, TemplateSet};

pub const DEFAULT_SEEDS: [u64; 3] = [111, 222, 333];
pub const DEFAULT_NUM_QUESTIONS: usize = 50;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("malformed questions: {}", .0.iter().map(|(id, v)| format!("{id} ({})", v.join("; "))).collect::<Vec<_>>().join(", "))]
    Malformed(Vec<(String, Vec<String>)>),
    #[error("requested {requested} questions but only {available} available")]
    InsufficientQuestions { requested: usize, available: usize },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Templates(#[from] TemplateError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("run aborted: {failed} of {total} sessions failed")]
    Aborted { failed: usize, total: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Debug, Deserialize)]
struct RawImage {
    media_type: String,
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    question: String,
    options: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    images: Vec<RawImage>,
}

/// Reads a line-delimited dataset. Image paths are resolved against the
/// dataset's directory but not read until a prompt needs them.
pub fn load_dataset(path: &Path, dataset: &str, modality: ModalityClass) -> Result<Vec<Question>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut questions = Vec::new();
    let mut malformed = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| BenchError::Parse { path: path.display().to_string(), line: n + 1, message };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;

        let mut violations = Vec::new();
        let mut options = BTreeMap::new();
        for (key, value) in raw.options {
            let text = match value {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            match key.parse::<Label>() {
                Ok(l) => {
                    options.insert(l, text);
                }
                Err(_) => violations.push(format!("option key {key:?} is not a single uppercase letter")),
            }
        }
        let gold_label = match raw.answer.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(a) => match a.parse::<Label>() {
                Ok(l) => Some(l),
                Err(_) => {
                    violations.push(format!("answer {a:?} is not a label"));
                    None
                }
            },
        };
        let q = Question {
            id: raw.id,
            dataset: dataset.to_string(),
            modality_class: modality,
            text: raw.question,
            options,
            gold_label,
            images: raw
                .images
                .into_iter()
                .map(|img| ImageAttachment::from_path(img.media_type, base.join(img.path)))
                .collect(),
        };
        violations.extend(q.violations());
        if violations.is_empty() {
            questions.push(q);
        } else {
            malformed.push((q.id, violations));
        }
    }
    if !malformed.is_empty() {
        return Err(BenchError::Malformed(malformed));
    }
    if questions.is_empty() {
        tracing::warn!(path = %path.display(), "dataset is empty");
    }
    Ok(questions)
}

/// Reads a file holding exactly one dataset record.
pub fn load_single_question(path: &Path, dataset: &str, modality: ModalityClass) -> Result<Question, BenchError> {
    let mut qs = load_dataset(path, dataset, modality)?;
    if qs.len() != 1 {
        return Err(BenchError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("expected exactly one question record, found {}", qs.len()),
        });
    }
    Ok(qs.remove(0))
}

/// `k` questions picked by SplitMix64 + partial Fisher–Yates, in shuffled
/// order.
pub fn sample_questions(questions: &[Question], k: usize, seed: u64) -> Result<Vec<Question>, BenchError> {
    if k > questions.len() {
        return Err(BenchError::InsufficientQuestions { requested: k, available: questions.len() });
    }
    Ok(partial_shuffle(questions.len(), k, seed).into_iter().map(|i| questions[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Run configuration

fn default_num_questions() -> usize {
    DEFAULT_NUM_QUESTIONS
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_parallelism() -> usize {
    1
}

/// Component override written either as flags or as a list string
/// ("all", "none", "leadership,mutual_trust").
fn component_override<'de, D: Deserializer<'de>>(d: D) -> Result<Option<TeamworkConfig>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        List(String),
        Names(Vec<String>),
        Flags(TeamworkConfig),
    }
    Ok(match Option::<Repr>::deserialize(d)? {
        None => None,
        Some(Repr::List(s)) => Some(TeamworkConfig::parse_list(&s).map_err(serde::de::Error::custom)?),
        Some(Repr::Names(v)) => Some(TeamworkConfig::parse_list(&v.join(",")).map_err(serde::de::Error::custom)?),
        Some(Repr::Flags(f)) => Some(f),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub dataset_name: String,
    #[serde(default = "default_modality")]
    pub modality_class: ModalityClass,
    #[serde(default = "default_num_questions")]
    pub num_questions: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub team_size_override: Option<usize>,
    #[serde(default, deserialize_with = "component_override")]
    pub component_override: Option<TeamworkConfig>,
    /// Row name in comparison tables; defaults to "adaptive" or the
    /// override's component list.
    #[serde(default)]
    pub configuration_label: Option<String>,
    pub backend: BackendSpec,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

fn default_modality() -> ModalityClass {
    ModalityClass::Unknown
}

impl RunConfig {
    /// Loads a TOML (or `.json`) run config. Relative paths inside it are
    /// taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.dataset_path);
        fix(&mut cfg.output_dir);
        if let Some(t) = cfg.templates_dir.as_mut() {
            fix(t);
        }
        if let BackendSpec::Scripted { script_path } = &mut cfg.backend {
            fix(script_path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.num_questions < 1 {
            return Err(BenchError::Config("num_questions must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(BenchError::Config("seeds must not be empty".into()));
        }
        if self.parallelism < 1 {
            return Err(BenchError::Config("parallelism must be at least 1".into()));
        }
        if let Some(n) = self.team_size_override {
            if !(MIN_TEAM..=MAX_TEAM).contains(&n) {
                return Err(BenchError::Config(format!("team_size_override {n} outside {MIN_TEAM}..={MAX_TEAM}")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match (&self.configuration_label, &self.component_override) {
            (Some(l), _) => l.clone(),
            (None, Some(c)) => c.to_string(),
            (None, None) => "adaptive".to_string(),
        }
    }

    pub fn templates(&self) -> Result<TemplateSet, BenchError> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::builtin(),
        })
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRow {
    pub seed: u64,
    pub question_id: String,
    pub deployment: usize,
    pub predicted: Option<Label>,
    pub gold: Option<Label>,
    pub correct: bool,
    pub failed: bool,
    pub answer_forced: bool,
    pub resolution_rate: f64,
    pub mean_orientation_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub sessions: usize,
    pub failed_sessions: usize,
    pub forced_answers: usize,
    pub issues_raised: usize,
    pub issues_resolved: usize,
    pub mean_resolution_rate: f64,
    pub mean_orientation_ratio: f64,
    pub retransmissions: usize,
    pub failed_verifications: usize,
    pub trust_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_config_echo: RunConfig,
    pub configuration: String,
    pub dataset: String,
    pub per_seed: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation of the per-seed accuracies.
    pub spread: f64,
    pub spread_statistic: String,
    pub per_question: Vec<QuestionRow>,
    pub telemetry: Telemetry,
    /// Sessions assigned to each deployment index.
    pub deployment_loads: BTreeMap<usize, usize>,
    #[serde(default)]
    pub aborted: bool,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| BenchError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two
/// values.
pub fn sample_std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 || xs.iter().all(|x| *x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean orientation ratio over the agents' own messages.
pub fn session_orientation(t: &SessionTranscript) -> f64 {
    let ratios: Vec<f64> = t
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Assessment | EventKind::DirectedMessage | EventKind::FinalAnswer))
        .map(|e| orientation_metric(&e.payload).ratio)
        .collect();
    if ratios.is_empty() {
        1.0
    } else {
        mean(&ratios)
    }
}

// ---------------------------------------------------------------------------
// Evaluation

struct Outcome {
    row: QuestionRow,
    transcript: SessionTranscript,
}

fn failed_transcript(q: &Question, seed: u64, config: TeamworkConfig, error: String) -> SessionTranscript {
    SessionTranscript {
        question_id: q.id.clone(),
        dataset: q.dataset.clone(),
        seed,
        team: vec![],
        config,
        events: vec![],
        trust_snapshots: vec![],
        issues: vec![],
        decision: None,
        failure: Some(error),
    }
}

fn run_one(
    cfg: &RunConfig,
    source: &BackendSource,
    templates: &TemplateSet,
    seed: u64,
    position: usize,
    q: &Question,
) -> Result<Outcome, BenchError> {
    let (deployment, backend) = source.for_question(position);
    let transcript = match recruit(q, backend.as_ref(), templates, seed, cfg.team_size_override, cfg.component_override)
    {
        Ok(r) => run_session(q, &r.team, r.config, backend.as_ref(), templates, seed)?,
        Err(e) => {
            tracing::warn!(question = %q.id, error = %e, "recruitment failed");
            let config = crate::recruit::select_components(q.modality_class, cfg.component_override);
            failed_transcript(q, seed, config, e.to_string())
        }
    };
    let predicted = transcript.decision.as_ref().map(|d| d.winner);
    let row = QuestionRow {
        seed,
        question_id: q.id.clone(),
        deployment,
        predicted,
        gold: q.gold_label,
        correct: predicted.is_some() && predicted == q.gold_label,
        failed: transcript.failed(),
        answer_forced: transcript.any_answer_forced(),
        resolution_rate: resolution_rate(&transcript.issues),
        mean_orientation_ratio: session_orientation(&transcript),
    };
    Ok(Outcome { row, transcript })
}

/// Evaluates with the backend described in `cfg`.
pub fn run_eval(cfg: &RunConfig) -> Result<RunReport, BenchError> {
    cfg.validate()?;
    let source = BackendSource::from_spec(&cfg.backend, None)?;
    let templates = cfg.templates()?;
    run_eval_with(cfg, &source, &templates)
}

/// Evaluates `cfg` against an already-built backend source.
pub fn run_eval_with(
    cfg: &RunConfig,
    source: &BackendSource,
    templates: &TemplateSet,
) -> Result<RunReport, BenchError> {
    use rayon::prelude::*;

    cfg.validate()?;
    let questions = load_dataset(&cfg.dataset_path, &cfg.dataset_name, cfg.modality_class)?;
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let sample = sample_questions(&questions, cfg.num_questions, seed)?;
        jobs.extend(sample.into_iter().enumerate().map(|(pos, q)| (seed, pos, q)));
    }
    let transcripts_dir = cfg.output_dir.join("transcripts");
    std::fs::create_dir_all(&transcripts_dir).map_err(io_err(&transcripts_dir))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        jobs.par_iter()
            .map(|(seed, pos, q)| {
                let out = run_one(cfg, source, templates, *seed, *pos, q)?;
                write_transcript(&transcripts_dir, &out.transcript).map_err(io_err(&transcripts_dir))?;
                Ok(out)
            })
            .collect::<Result<Vec<_>, BenchError>>()
    })?;

    let report = build_report(cfg, &outcomes, source);
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    report.write(&cfg.output_dir.join("report.json"))?;
    if report.aborted {
        return Err(BenchError::Aborted { failed: report.telemetry.failed_sessions, total: report.telemetry.sessions });
    }
    Ok(report)
}

fn build_report(cfg: &RunConfig, outcomes: &[Outcome], source: &BackendSource) -> RunReport {
    let per_seed: Vec<SeedResult> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let rows: Vec<&QuestionRow> = outcomes.iter().map(|o| &o.row).filter(|r| r.seed == seed).collect();
            let correct = rows.iter().filter(|r| r.correct).count();
            let total = rows.len();
            SeedResult { seed, correct, total, accuracy: correct as f64 / total as f64 }
        })
        .collect();
    let accuracies: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();

    let mut t = Telemetry { sessions: outcomes.len(), ..Telemetry::default() };
    let mut loads = BTreeMap::new();
    for o in outcomes {
        *loads.entry(o.row.deployment).or_insert(0) += 1;
        t.failed_sessions += usize::from(o.row.failed);
        t.forced_answers += usize::from(o.row.answer_forced);
        t.issues_raised += o.transcript.issues.len();
        t.issues_resolved += o.transcript.issues.iter().filter(|i| i.resolved).count();
        t.trust_updates += o.transcript.count(EventKind::TrustUpdate);
        t.retransmissions += o
            .transcript
            .events_of(EventKind::Acknowledgment)
            .filter(|e| e.extra.contains_key("retransmission"))
            .count();
        t.failed_verifications += o
            .transcript
            .events_of(EventKind::Verification)
            .filter(|e| e.extra.get("verdict").and_then(|v| v.as_str()) == Some("DENY"))
            .count();
    }
    let rows: Vec<QuestionRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    t.mean_resolution_rate = mean(&rows.iter().map(|r| r.resolution_rate).collect::<Vec<_>>());
    t.mean_orientation_ratio = mean(&rows.iter().map(|r| r.mean_orientation_ratio).collect::<Vec<_>>());
    if let BackendSource::Pool(_) = source {
        for (name, (requests, failures)) in source.deployment_stats() {
            tracing::info!(deployment = %name, requests, failures, "deployment usage");
        }
    }

    RunReport {
        run_config_echo: cfg.clone(),
        configuration: cfg.label(),
        dataset: cfg.dataset_name.clone(),
        mean_accuracy: mean(&accuracies),
        spread: sample_std_dev(&accuracies),
        spread_statistic: "sample_std_dev".to_string(),
        per_seed,
        per_question: rows,
        aborted: 2 * t.failed_sessions > t.sessions,
        telemetry: t,
        deployment_loads: loads,
    }
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub config: TeamworkConfig,
}

impl NamedConfig {
    pub fn new(name: &str, config: TeamworkConfig) -> Self {
        Self { name: name.to_string(), config }
    }
}

/// The six single-component configurations, in results-table order.
pub fn single_component_configs() -> Vec<NamedConfig> {
    let one = |f: fn(&mut TeamworkConfig)| {
        let mut c = TeamworkConfig::none();
        f(&mut c);
        c
    };
    vec![
        NamedConfig::new("Leadership", one(|c| c.leadership = true)),
        NamedConfig::new("Closed-loop", one(|c| c.closed_loop = true)),
        NamedConfig::new("Mutual Monitoring", one(|c| c.mutual_monitoring = true)),
        NamedConfig::new("Shared Mental Model", one(|c| c.shared_mental_model = true)),
        NamedConfig::new("Team Orientation", one(|c| c.team_orientation = true)),
        NamedConfig::new("Mutual Trust", one(|c| c.mutual_trust = true)),
    ]
}

/// Baseline, the six singles, and everything on.
pub fn standard_configs() -> Vec<NamedConfig> {
    let mut v = vec![NamedConfig::new("Baseline", TeamworkConfig::none())];
    v.extend(single_component_configs());
    v.push(NamedConfig::new("All Features", TeamworkConfig::all()));
    v
}

/// Resolves a configuration list: "single", "standard", or comma-separated
/// names from the standard set.
pub fn named_configs(spec: &str) -> Result<Vec<NamedConfig>, BenchError> {
    match spec.trim().to_ascii_lowercase().as_str() {
        "single" => return Ok(single_component_configs()),
        "standard" => return Ok(standard_configs()),
        _ => {}
    }
    let all = standard_configs();
    spec.split(',')
        .map(|name| {
            let key = name.trim().to_ascii_lowercase();
            all.iter()
                .find(|c| c.name.to_ascii_lowercase() == key)
                .cloned()
                .or_else(|| TeamworkConfig::parse_list(name).ok().map(|c| NamedConfig::new(name.trim(), c)))
                .ok_or_else(|| BenchError::Config(format!("unknown configuration {name:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub configuration: String,
    pub size: usize,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
}

impl AblationMatrix {
    /// `configuration,size,seed,accuracy`, one row per seed per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("configuration,size,seed,accuracy\n");
        for c in &self.cells {
            for s in &c.report.per_seed {
                let _ = writeln!(out, "{},{},{},{}", csv_field(&c.configuration), c.size, s.seed, s.accuracy);
            }
        }
        out
    }

    /// Configurations as rows, team sizes as columns, cells `mean ± spread`
    /// in percent.
    pub fn render_table(&self) -> String {
        let mut configs: Vec<&str> = Vec::new();
        let mut sizes: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !configs.contains(&c.configuration.as_str()) {
                configs.push(&c.configuration);
            }
            if !sizes.contains(&c.size) {
                sizes.push(c.size);
            }
        }
        sizes.sort_unstable();
        let header: Vec<String> =
            std::iter::once("configuration".to_string()).chain(sizes.iter().map(|n| format!("n={n}"))).collect();
        let rows: Vec<Vec<String>> = configs
            .iter()
            .map(|name| {
                std::iter::once(name.to_string())
                    .chain(sizes.iter().map(|n| {
                        self.cells
                            .iter()
                            .find(|c| c.configuration == *name && c.size == *n)
                            .map_or("-".to_string(), |c| pct(c.report.mean_accuracy, c.report.spread))
                    }))
                    .collect()
            })
            .collect();
        align(&header, &rows)
    }
}

fn pct(mean: f64, spread: f64) -> String {
    format!("{:.1} ± {:.1}", mean * 100.0, spread * 100.0)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn align(header: &[String], rows: &[Vec<String>]) -> String {
    let width = |i: usize| {
        std::iter::once(&header[i]).chain(rows.iter().map(|r| &r[i])).map(|s| s.chars().count()).max().unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let line = |cells: &[String]| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn cell_dir_name(name: &str, size: usize) -> String {
    let slug: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    format!("{slug}_n{size}")
}

/// Runs every (configuration, size) cell and writes `matrix.csv` to the
/// base output directory.
pub fn run_ablation(
    base: &RunConfig,
    configurations: &[NamedConfig],
    team_sizes: &[usize],
) -> Result<AblationMatrix, BenchError> {
    let source = BackendSource::from_spec(&base.backend, None)?;
    let templates = base.templates()?;
    run_ablation_with(base, configurations, team_sizes, &source, &templates)
}

pub fn run_ablation_with(
    base: &RunConfig,
    configurations: &[NamedConfig],
    team_sizes: &[usize],
    source: &BackendSource,
    templates: &TemplateSet,
) -> Result<AblationMatrix, BenchError> {
    if configurations.is_empty() || team_sizes.is_empty() {
        return Err(BenchError::Config("ablation needs at least one configuration and one team size".into()));
    }
    if let Some(bad) = team_sizes.iter().find(|n| !(MIN_TEAM..=MAX_TEAM).contains(*n)) {
        return Err(BenchError::Config(format!("team size {bad} outside {MIN_TEAM}..={MAX_TEAM}")));
    }
    let mut cells = Vec::new();
    for named in configurations {
        for &size in team_sizes {
            let mut cfg = base.clone();
            cfg.component_override = Some(named.config);
            cfg.team_size_override = Some(size);
            cfg.configuration_label = Some(named.name.clone());
            cfg.output_dir = base.output_dir.join("cells").join(cell_dir_name(&named.name, size));
            tracing::info!(configuration = %named.name, size, "ablation cell");
            let report = run_eval_with(&cfg, source, templates)?;
            cells.push(AblationCell { configuration: named.name.clone(), size, report });
        }
    }
    let matrix = AblationMatrix { cells };
    std::fs::create_dir_all(&base.output_dir).map_err(io_err(&base.output_dir))?;
    let csv_path = base.output_dir.join("matrix.csv");
    std::fs::write(&csv_path, matrix.to_csv()).map_err(io_err(&csv_path))?;
    let table_path = base.output_dir.join("matrix.txt");
    std::fs::write(&table_path, matrix.render_table()).map_err(io_err(&table_path))?;
    Ok(matrix)
}

// ---------------------------------------------------------------------------
// Report comparison

/// `(mean, spread)` per dataset column; `None` where no report exists.
pub type ComparisonRow = (String, Vec<Option<(f64, f64)>>);

/// Rows are configurations, columns datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub datasets: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

pub fn merge_reports(reports: &[RunReport]) -> ComparisonTable {
    let mut datasets: Vec<String> = Vec::new();
    let mut configs: Vec<String> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        if !configs.contains(&r.configuration) {
            configs.push(r.configuration.clone());
        }
    }
    let rows = configs
        .into_iter()
        .map(|c| {
            let cells = datasets
                .iter()
                .map(|d| {
                    reports
                        .iter()
                        .rev()
                        .find(|r| r.configuration == c && &r.dataset == d)
                        .map(|r| (r.mean_accuracy, r.spread))
                })
                .collect();
            (c, cells)
        })
        .collect();
    ComparisonTable { datasets, rows }
}

impl ComparisonTable {
    pub fn render_text(&self) -> String {
        let header: Vec<String> =
            std::iter::once("configuration".to_string()).chain(self.datasets.iter().cloned()).collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(name, cells)| {
                std::iter::once(name.clone())
                    .chain(cells.iter().map(|c| c.map_or("-".to_string(), |(m, s)| pct(m, s))))
                    .collect()
            })
            .collect();
        align(&header, &rows)
    }

    /// Long-form CSV: `configuration,dataset,mean_accuracy,spread`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("configuration,dataset,mean_accuracy,spread\n");
        for (name, cells) in &self.rows {
            for (d, c) in self.datasets.iter().zip(cells) {
                if let Some((m, s)) = c {
                    let _ = writeln!(out, "{},{},{},{}", csv_field(name), csv_field(d), m, s);
                }
            }
        }
        out
    }
}

/// Convenience for callers that only have a script in memory.
pub fn scripted_source(script: crate::backend::Script) -> BackendSource {
    BackendSource::Scripted(Arc::new(script))
}
