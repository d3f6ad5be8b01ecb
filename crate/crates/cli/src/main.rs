//! `crisisml`: build instruction datasets from labeled disaster tweets, run
//! multi-label classification inference against completion endpoints,
//! ensemble checkpoint predictions, and generate reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 unrecoverable I/O.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use crisisml_core::templates::TemplateId;
use crisisml_core::Error as CoreError;

use config::ConfigFile;

#[derive(Parser)]
#[command(name = "crisisml", version, about = "Instruction-tuning pipeline for multi-label disaster tweet classification")]
struct Cli {
    /// TOML file supplying defaults for any flag below; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a labeled tweet corpus into an instruction dataset.
    Build {
        /// JSON-lines corpus of labeled tweets.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory for instances, records and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shuffle seed for the train/test split.
        #[arg(long)]
        seed: Option<u64>,
        /// Train fraction in (0, 1); omit to convert the whole corpus.
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Run checkpoint endpoints over the inference records.
    Infer {
        /// Manifest written by `build`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// TOML file with [[endpoint]] entries.
        #[arg(long)]
        endpoints: Option<PathBuf>,
        /// Prompt template (T1_EVENT..T5_MULTI_INST), default T4_MULTI.
        #[arg(long)]
        template: Option<String>,
        /// Directory for persisted runs; completed runs there are resumed.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Sweep the top-N majority-vote ensemble over persisted runs.
    Ensemble {
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Largest ensemble size to sweep (default 15).
        #[arg(long)]
        n_max: Option<usize>,
        /// Output CSV path (default <runs>/sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict the sweep to runs of this template (default T4_MULTI).
        #[arg(long)]
        template: Option<String>,
    },
    /// Generate report.md, metrics.csv and sweep.csv from persisted runs.
    Report {
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Output directory (default <runs>/report).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leaderboard/sweep template (default T4_MULTI).
        #[arg(long)]
        template: Option<String>,
    },
    /// Host the scripted mock completion endpoint.
    MockServe {
        /// JSON script mapping sample ids to response lists.
        #[arg(long)]
        script: PathBuf,
        /// Corpus used to match prompts back to sample ids.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Listen address, e.g. 127.0.0.1:8732.
        #[arg(long, default_value = "127.0.0.1:8732")]
        addr: String,
    },
}

/// A post-parse usage problem (missing required option, bad template name).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "usage: {}", self.0)
    }
}

impl std::error::Error for Usage {}

fn required<T>(flag: &str, value: Option<T>) -> anyhow::Result<T> {
    value.ok_or_else(|| Usage(format!("--{flag} is required (flag or config file)")).into())
}

fn parse_template(value: Option<String>, default: TemplateId) -> anyhow::Result<TemplateId> {
    match value {
        None => Ok(default),
        Some(raw) => raw.parse::<TemplateId>().map_err(|e| Usage(e).into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::Build {
            corpus,
            out,
            seed,
            train_fraction,
        } => {
            let corpus = required("corpus", corpus.or(file.build.corpus))?;
            let out = required("out", out.or(file.build.out))?;
            let seed = seed.or(file.build.seed).unwrap_or(0);
            let train_fraction = train_fraction.or(file.build.train_fraction);
            commands::cmd_build(&corpus, &out, seed, train_fraction)
        }
        Command::Infer {
            manifest,
            endpoints,
            template,
            runs,
        } => {
            let manifest = required("manifest", manifest.or(file.infer.manifest))?;
            let endpoints = required("endpoints", endpoints.or(file.infer.endpoints))?;
            let template =
                parse_template(template.or(file.infer.template), TemplateId::T4Multi)?;
            let runs = required("runs", runs.or(file.infer.runs))?;
            commands::cmd_infer(&manifest, &endpoints, template, &runs)
        }
        Command::Ensemble {
            runs,
            n_max,
            out,
            template,
        } => {
            let runs = required("runs", runs.or(file.ensemble.runs))?;
            let n_max = n_max.or(file.ensemble.n_max).unwrap_or(15);
            let out = out.or(file.ensemble.out).unwrap_or_else(|| runs.join("sweep.csv"));
            let template =
                parse_template(template.or(file.ensemble.template), TemplateId::T4Multi)?;
            commands::cmd_ensemble(&runs, n_max, &out, template)
        }
        Command::Report { runs, out, template } => {
            let runs = required("runs", runs.or(file.report.runs))?;
            let out = out.or(file.report.out).unwrap_or_else(|| runs.join("report"));
            let template =
                parse_template(template.or(file.report.template), TemplateId::T4Multi)?;
            commands::cmd_report(&runs, &out, template)
        }
        Command::MockServe {
            script,
            records,
            addr,
        } => commands::cmd_mock_serve(&script, records.as_deref(), &addr),
    }
}

fn exit_code(error: &anyhow::Error) -> i32 {
    if error.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match error.downcast_ref::<CoreError>() {
        Some(CoreError::Io { .. }) | Some(CoreError::InvalidFile { .. }) => 3,
        Some(_) => 2,
        // Errors raised outside the core (config parsing, bad TOML) are
        // data problems unless the chain bottoms out in I/O.
        None => {
            if error.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
                3
            } else {
                2
            }
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(error) = run(cli) {
        eprintln!("error: {error:#}");
        std::process::exit(exit_code(&error));
    }
}
