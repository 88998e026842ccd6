//! Command-line front end. Every command is a thin wrapper over library
//! calls; [`run_cli`] is callable in-process so tests can capture output.
//!
//! Exit codes:
//!
//! | code | meaning                                               |
//! |------|-------------------------------------------------------|
//! | 0    | success                                               |
//! | 1    | other runtime error (backend setup, templates)        |
//! | 2    | session failed, or a run aborted on its failure limit |
//! | 64   | usage error                                           |
//! | 65   | malformed input (config, dataset, question content)   |
//! | 66   | input file missing or unreadable                      |

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::backend::{BackendError, BackendSource, BackendSpec};
use crate::bench::{
    load_single_question, merge_reports, named_configs, run_ablation, run_eval, BenchError, RunConfig, RunReport,
};
use crate::collab::{run_session, write_transcript};
use crate::domain::{ModalityClass, TeamworkConfig};
use crate::recruit::recruit;
use crate::templates::TemplateSet;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_SESSION_FAILED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;

#[derive(Debug, Parser)]
#[command(name = "teamsmith", version, about = "Multi-agent teamwork sessions and MCQ benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one session on a single question.
    Run(RunArgs),
    /// Evaluate a dataset described by a run config.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every (configuration, team size) cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// "single", "standard", or a comma list of configuration names.
        #[arg(long, default_value = "standard")]
        configs: String,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        sizes: Vec<usize>,
    },
    /// Merge report.json files into a configuration × dataset table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Where to write the CSV form of the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// File holding one dataset record.
    #[arg(long)]
    pub question: PathBuf,
    #[arg(long, default_value = "unknown")]
    pub modality: ModalityClass,
    /// "auto", "all", "none", or a comma list of component names.
    #[arg(long, default_value = "auto")]
    pub components: String,
    #[arg(long)]
    pub team_size: Option<usize>,
    /// "scripted:PATH" or a TOML/JSON backend spec file.
    #[arg(long)]
    pub backend: String,
    #[arg(long, default_value_t = 111)]
    pub seed: u64,
    /// Directory for the transcript.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Dataset name used in the transcript; defaults to the file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

/// `None` for "auto".
pub fn parse_components(s: &str) -> Result<Option<TeamworkConfig>, crate::domain::DomainError> {
    if s.trim().eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        TeamworkConfig::parse_list(s).map(Some)
    }
}

/// Resolves `--backend`: `scripted:PATH`, or a file holding a backend spec.
pub fn parse_backend(arg: &str) -> Result<BackendSource, BackendError> {
    if let Some(path) = arg.strip_prefix("scripted:") {
        return BackendSource::from_spec(&BackendSpec::Scripted { script_path: path.into() }, None);
    }
    let path = Path::new(arg);
    let text =
        std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("reading {}: {e}", path.display())))?;
    let spec: BackendSpec = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).map_err(|e| BackendError::Config(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| BackendError::Config(e.to_string()))?
    };
    BackendSource::from_spec(&spec, path.parent())
}

/// Failures carry the exit code chosen for them.
#[derive(Debug)]
struct Exit(i32);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(Exit(code)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(b) = cause.downcast_ref::<BenchError>() {
            return match b {
                BenchError::Io { .. } => EXIT_NO_INPUT,
                BenchError::Parse { .. }
                | BenchError::Malformed(_)
                | BenchError::Config(_)
                | BenchError::InsufficientQuestions { .. } => EXIT_DATA,
                BenchError::Aborted { .. } | BenchError::Session(_) => EXIT_SESSION_FAILED,
                BenchError::Backend(_) | BenchError::Templates(_) => EXIT_ERROR,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_NO_INPUT;
        }
    }
    EXIT_ERROR
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Run(args) => cmd_run(args, out),
        Command::Eval { config } => cmd_eval(&config, out),
        Command::Ablate { config, configs, sizes } => cmd_ablate(&config, &configs, &sizes, out),
        Command::Report { reports, out: csv } => cmd_report(&reports, csv.as_deref(), out),
    }
}

fn cmd_run(args: RunArgs, out: &mut dyn Write) -> Result<i32> {
    let components = parse_components(&args.components).map_err(|e| anyhow::Error::new(Exit(EXIT_USAGE)).context(e))?;
    if let Some(n) = args.team_size {
        if !(crate::recruit::MIN_TEAM..=crate::recruit::MAX_TEAM).contains(&n) {
            return Err(anyhow::Error::new(Exit(EXIT_USAGE)).context(format!("--team-size {n} is outside 2..=5")));
        }
    }
    let dataset = args
        .dataset
        .clone()
        .unwrap_or_else(|| args.question.file_stem().map_or("question".into(), |s| s.to_string_lossy().into_owned()));
    let question = load_single_question(&args.question, &dataset, args.modality)?;
    let source = parse_backend(&args.backend).map_err(|e| match &e {
        BackendError::Config(m) if m.starts_with("reading") => anyhow::Error::new(Exit(EXIT_NO_INPUT)).context(e),
        _ => anyhow::Error::new(e),
    })?;
    let templates = match &args.templates {
        Some(dir) => TemplateSet::with_overrides(dir)?,
        None => TemplateSet::builtin(),
    };
    let (_, backend) = source.for_question(0);

    let transcript = match recruit(&question, backend.as_ref(), &templates, args.seed, args.team_size, components) {
        Ok(r) => {
            writeln!(out, "question: {}", question.id)?;
            writeln!(out, "components: {}", r.config)?;
            for a in &r.team {
                let lead = if a.is_leader { " (leader)" } else { "" };
                writeln!(out, "agent {}: {} weight {:.3}{lead}", a.agent_id, a.role_title, a.weight)?;
            }
            run_session(&question, &r.team, r.config, backend.as_ref(), &templates, args.seed)?
        }
        Err(e) => {
            writeln!(out, "session failed: recruitment: {e}")?;
            return Ok(EXIT_SESSION_FAILED);
        }
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path =
        write_transcript(&args.out, &transcript).with_context(|| format!("writing into {}", args.out.display()))?;

    match (&transcript.decision, &transcript.failure) {
        (Some(d), _) => {
            writeln!(out, "winner: {}", d.winner)?;
            writeln!(out, "label  weight")?;
            for (label, w) in &d.tallies {
                writeln!(out, "{:<5}  {w:.4}", label.to_string())?;
            }
            for line in &d.tiebreak_trace {
                writeln!(out, "tiebreak: {line}")?;
            }
            writeln!(out, "transcript: {}", path.display())?;
            Ok(EXIT_OK)
        }
        (None, failure) => {
            writeln!(out, "session failed: {}", failure.as_deref().unwrap_or("no decision"))?;
            writeln!(out, "transcript: {}", path.display())?;
            Ok(EXIT_SESSION_FAILED)
        }
    }
}

fn print_report(r: &RunReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{} on {}", r.configuration, r.dataset)?;
    for s in &r.per_seed {
        writeln!(out, "seed {}: {}/{} = {:.3}", s.seed, s.correct, s.total, s.accuracy)?;
    }
    writeln!(out, "mean accuracy: {:.3} (sample sd {:.3})", r.mean_accuracy, r.spread)?;
    writeln!(
        out,
        "sessions: {} failed: {} forced answers: {}",
        r.telemetry.sessions, r.telemetry.failed_sessions, r.telemetry.forced_answers
    )?;
    Ok(())
}

fn cmd_eval(config: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let report = run_eval(&cfg)?;
    print_report(&report, out)?;
    writeln!(out, "report: {}", cfg.output_dir.join("report.json").display())?;
    Ok(EXIT_OK)
}

fn cmd_ablate(config: &Path, configs: &str, sizes: &[usize], out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let named = named_configs(configs).map_err(|e| anyhow::Error::new(Exit(EXIT_USAGE)).context(e))?;
    let matrix = run_ablation(&cfg, &named, sizes)?;
    write!(out, "{}", matrix.render_table())?;
    writeln!(out, "matrix: {}", cfg.output_dir.join("matrix.csv").display())?;
    Ok(EXIT_OK)
}

fn cmd_report(paths: &[PathBuf], csv: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let reports = paths.iter().map(|p| RunReport::load(p)).collect::<Result<Vec<_>, _>>()?;
    let table = merge_reports(&reports);
    write!(out, "{}", table.render_text())?;
    if let Some(path) = csv {
        std::fs::write(path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        writeln!(out, "csv: {}", path.display())?;
    }
    Ok(EXIT_OK)
}
