use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use evalkit::corpus::{load_dataset, load_dataset_as, write_jsonl, SchemaRegistry};
use evalkit::gateway::ENDPOINT_ENV;
use evalkit::mockserver::{serve, MockScript};
use evalkit::postproc::{RuleContext, RuleRegistry};
use evalkit::runner::{find_reports, RunConfig, RunControl, RunReport, Runner, ScoreGrid};

#[derive(Parser)]
#[command(
    name = "eval",
    version,
    about = "Batch LLM evaluation against an HTTP model service"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every task in a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's model_endpoint.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Continue an interrupted run from its output directory.
    Resume {
        dir: PathBuf,
        /// Must match the cached config on tasks, params, seed and limit.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Print the reports found under a directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Serve a scripted mock model until interrupted.
    ServeMock {
        /// Script JSON; echo mode when omitted.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 8000)]
        port: u16,
    },
    /// Normalize a raw dataset into JSON Lines.
    MakeData {
        #[arg(long)]
        schema: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Task name for synthetic ids; defaults to the input file stem.
        #[arg(long)]
        task: Option<String>,
    },
    /// Apply one post-processing rule to a file or stdin.
    Postproc {
        #[arg(long)]
        rule: String,
        #[arg(long = "in", default_value = "-")]
        input: String,
        #[arg(long)]
        entry_point: Option<String>,
        #[arg(long)]
        num_choices: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Markdown,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

async fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, endpoint } => {
            let mut config = RunConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            apply_endpoint(&mut config, endpoint);
            let control = interrupt_control();
            let report = Runner::default().run_with(&config, &control).await?;
            Ok(finish(&report))
        }
        Command::Resume {
            dir,
            config,
            endpoint,
        } => {
            let supplied = match (config, endpoint) {
                (None, None) => None,
                (config, endpoint) => {
                    let mut c = match config {
                        Some(p) => RunConfig::load(&p)
                            .with_context(|| format!("loading {}", p.display()))?,
                        None => evalkit::runner::read_snapshot(&dir)?,
                    };
                    apply_endpoint(&mut c, endpoint);
                    Some(c)
                }
            };
            let control = interrupt_control();
            let report = Runner::default()
                .resume_with(&dir, supplied.as_ref(), &control)
                .await?;
            Ok(finish(&report))
        }
        Command::Report { dir, format } => {
            let reports = find_reports(&dir)?;
            if reports.is_empty() {
                bail!("no run reports under {}", dir.display());
            }
            print_reports(&reports, format)?;
            let complete = reports.iter().all(RunReport::is_complete);
            Ok(if complete {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::ServeMock { script, port } => {
            let script = match script {
                Some(p) => {
                    let body = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&body)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => MockScript::echo(),
            };
            let handle = serve(script, port).await?;
            eprintln!("mock listening on {}", handle.endpoint());
            tokio::signal::ctrl_c().await?;
            handle.stop().await;
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeData {
            schema,
            input,
            out,
            task,
        } => {
            let registry = SchemaRegistry::default();
            let stream = match &task {
                Some(t) => load_dataset_as(&registry, &input, &schema, t)?,
                None => load_dataset(&registry, &input, &schema)?,
            };
            let items = stream.collect::<Result<Vec<_>, _>>()?;
            let file = std::fs::File::create(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let n = write_jsonl(BufWriter::new(file), &items)?;
            eprintln!("wrote {n} items to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Postproc {
            rule,
            input,
            entry_point,
            num_choices,
        } => {
            let text = read_input(&input)?;
            let chain = RuleRegistry::default().build_chain(&[rule], "*", "*")?;
            let ctx = RuleContext {
                entry_point,
                num_choices,
            };
            print!("{}", chain.apply(&text, &ctx));
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// The flag wins; the environment only fills an empty config field.
fn apply_endpoint(config: &mut RunConfig, flag: Option<String>) {
    if let Some(e) = flag {
        config.model_endpoint = e;
    } else if config.model_endpoint.is_empty() {
        if let Ok(e) = std::env::var(ENDPOINT_ENV) {
            config.model_endpoint = e;
        }
    }
}

/// Ctrl-C stops new dispatches; what was received stays cached for resume.
fn interrupt_control() -> RunControl {
    let control = RunControl::default();
    let cancel = control.cancel.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupt received, finishing in-flight requests");
            cancel.store(true, Ordering::SeqCst);
        }
    });
    control
}

fn finish(report: &RunReport) -> ExitCode {
    let grid = ScoreGrid::from_reports([report]);
    print!("{}", grid.to_table());
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.task, s.error);
    }
    if report.is_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn print_reports(reports: &[RunReport], format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(reports)?),
        Format::Table => print!("{}", ScoreGrid::from_reports(reports).to_table()),
        Format::Markdown => print!("{}", ScoreGrid::from_reports(reports).to_markdown()),
    }
    Ok(())
}

fn read_input(input: &str) -> Result<String> {
    if input == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(Path::new(input)).with_context(|| format!("reading {input}"))
    }
}
