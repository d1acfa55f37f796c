//! Command-line entry points and the HTTP parse service.

pub mod server;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use navparse::dataset::{generate, load_examples, load_paraphrases, load_templates, save_examples, split};
use navparse::evaluation::{evaluate, EvalReport};
use navparse::inference::PredictionDocument;
use navparse::schema::load_site_schema;
use navparse::training::{predict, train_run, tune_inference, Component, RunMode};
use navparse::{ModelBundle, SiteSchema, TrainingConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const TRAINING: i32 = 3;
    pub const UNKNOWN_PAGE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct CliError {
    pub code: i32,
    #[source]
    pub source: navparse::Error,
}

impl From<navparse::Error> for CliError {
    fn from(source: navparse::Error) -> Self {
        use navparse::Error as E;
        let code = match &source {
            E::UnknownPage(_) => exit::UNKNOWN_PAGE,
            E::Training(_) => exit::TRAINING,
            E::Json(_) | E::Line { .. } | E::Validation(_) | E::Generation(_) | E::Empty(_) => exit::VALIDATION,
            E::Io { .. } | E::Model(_) | E::Checkpoint(_) => exit::FAILURE,
        };
        CliError { code, source }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        navparse::Error::io("<stdio>", e).into()
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "navparse", version, about = "Parse natural-language commands into web navigation instructions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ComponentArg {
    Action,
    Mention,
    Value,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Instantiate templates into train/valid/test JSONL files.
    Generate {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        paraphrases: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Train, valid and test fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
        split: Vec<f64>,
    },
    /// Train a bundle from DIR/{schema.json,train.jsonl,valid.jsonl}.
    Train {
        /// Training config JSON; published defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        component: ComponentArg,
        /// Grid-search (rho, alpha) on the validation split afterwards.
        #[arg(long)]
        tune: bool,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.67,0.7,0.8,0.9,1")]
        rho_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        alpha_grid: Vec<f64>,
    },
    /// Parse every test example and score the predictions.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Output directory for report.json and predictions.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse one command, or read commands from stdin with --repl.
    Parse {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        page: String,
        #[arg(long, conflicts_with = "repl", required_unless_present = "repl")]
        command: Option<String>,
        #[arg(long)]
        repl: bool,
    },
    /// Serve POST /v1/parse and GET /v1/health.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Maps `FLIN_LOG_LEVEL` onto the logger, defaulting to `info`.
pub fn init_logging() {
    let level = std::env::var("FLIN_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp_millis()
        .target(env_logger::Target::Stderr)
        .init();
}

pub fn run(cli: Cli, stdin: impl BufRead, mut stdout: impl Write) -> CliResult {
    match cli.command {
        Command::Generate {
            schema,
            templates,
            paraphrases,
            count,
            seed,
            out,
            split: ratios,
        } => {
            let [tr, va, te] = ratios[..] else {
                return Err(navparse::Error::Validation("--split takes three fractions".into()).into());
            };
            let schema_text = navparse::error::read_to_string(&schema)?;
            let site = SiteSchema::from_json_str(&schema_text)?;
            let examples = generate(&site, &load_templates(&templates)?, &load_paraphrases(&paraphrases)?, count, seed)?;
            let parts = split(&examples, (tr, va, te), seed)?;
            navparse::error::write_file(&out.join("schema.json"), schema_text)?;
            for (name, part) in [("train", &parts.train), ("valid", &parts.valid), ("test", &parts.test)] {
                save_examples(part, out.join(format!("{name}.jsonl")))?;
                writeln!(stdout, "{name}: {} examples", part.len())?;
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            component,
            tune,
            rho_grid,
            alpha_grid,
        } => {
            let config = match config {
                Some(p) => serde_json::from_str(&navparse::error::read_to_string(&p)?).map_err(navparse::Error::from)?,
                None => TrainingConfig::default(),
            };
            let schema = load_site_schema(data.join("schema.json"))?;
            let train = load_examples(data.join("train.jsonl"), Some(&schema))?;
            let valid = load_examples(data.join("valid.jsonl"), Some(&schema))?;
            let mode = match component {
                ComponentArg::All => RunMode::Resume,
                ComponentArg::Action => RunMode::Only(Component::Action),
                ComponentArg::Mention => RunMode::Only(Component::Mention),
                ComponentArg::Value => RunMode::Only(Component::Value),
            };
            let mut io_err = None;
            let outcome = train_run(&schema, &train, &valid, &config, &out, mode, |r| {
                let line = serde_json::to_string(r).expect("epoch records serialize");
                if let Err(e) = writeln!(stdout, "{line}").and_then(|_| stdout.flush()) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            match outcome.bundle {
                Some(mut bundle) if tune => {
                    let (cfg, _) = tune_inference(&bundle.models, &schema, &valid, &rho_grid, &alpha_grid, &bundle.inference)?;
                    info!("tuned rho = {}, alpha = {}", cfg.rho, cfg.alpha);
                    bundle.inference = cfg;
                    bundle.save_inference(&out)?;
                }
                Some(_) => {}
                None => info!("bundle incomplete; train the remaining components to use it"),
            }
            Ok(())
        }
        Command::Eval {
            bundle,
            test,
            schema,
            out,
        } => {
            let schema = load_site_schema(&schema)?;
            let bundle = ModelBundle::load(&bundle)?;
            let examples = load_examples(&test, Some(&schema))?;
            if examples.is_empty() {
                return Err(navparse::Error::Empty("test file has no examples").into());
            }
            let preds = predict(&bundle.models, &schema, &examples, &bundle.inference)?;
            let report = evaluate(&schema, &examples, &preds)?;
            let mut lines = String::new();
            for (e, p) in examples.iter().zip(&preds) {
                let row = serde_json::json!({"command": e.command, "page_id": e.page_id, "gold": e.gold, "prediction": p});
                lines.push_str(&row.to_string());
                lines.push('\n');
            }
            navparse::error::write_file(&out.join("predictions.jsonl"), lines)?;
            navparse::error::write_file(
                &out.join("report.json"),
                serde_json::to_string_pretty(&report).map_err(navparse::Error::from)?,
            )?;
            write_report(&mut stdout, &report, &test)?;
            Ok(())
        }
        Command::Parse {
            bundle,
            schema,
            page,
            command,
            repl,
        } => {
            let schema = load_site_schema(&schema)?;
            schema.actions_of(&page)?;
            let bundle = ModelBundle::load(&bundle)?;
            if repl {
                for line in stdin.lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let doc = parse_document(&bundle, &schema, &page, &line)?;
                    writeln!(stdout, "{}", serde_json::to_string(&doc).map_err(navparse::Error::from)?)?;
                    stdout.flush()?;
                }
            } else {
                let command = command.expect("clap enforces --command without --repl");
                let doc = parse_document(&bundle, &schema, &page, &command)?;
                writeln!(stdout, "{}", serde_json::to_string(&doc).map_err(navparse::Error::from)?)?;
            }
            Ok(())
        }
        Command::Serve {
            bundle,
            schema,
            port,
            host,
        } => {
            let schema = load_site_schema(&schema)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(&host, port, bundle, schema))?;
            Ok(())
        }
    }
}

fn write_report(out: &mut impl Write, report: &EvalReport, test: &Path) -> std::io::Result<()> {
    writeln!(out, "{}", EvalReport::table_header())?;
    writeln!(out, "{}", report.table_row(&test.file_stem().unwrap_or_default().to_string_lossy()))?;
    write!(out, "{}", report.error_table())
}

/// Parses one command into the wire document shared by the CLI and server.
pub fn parse_document(
    bundle: &ModelBundle,
    schema: &SiteSchema,
    page: &str,
    command: &str,
) -> navparse::Result<PredictionDocument> {
    let pred = bundle.parse(schema, page, command)?;
    Ok(PredictionDocument::new(command, page, pred.as_ref()))
}

/// Wall-clock helper for request latency.
pub fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
