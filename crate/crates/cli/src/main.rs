use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hcforge::config::{load_config, parse_config, Config};
use hcforge::fixture::build_fixture;
use hcforge::manifest::Stage;
use hcforge::pipeline::{exit_code, Pipeline, Runtime};
use tracing::error;
use tracing_subscriber::EnvFilter;

/// Construction-site chip corpus and VQA dataset builder.
#[derive(Parser)]
#[command(name = "hcforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse site and region annotation files.
    Ingest(RunArgs),
    /// Plan catalog matches for every eligible observation.
    Resolve(RunArgs),
    /// Download the chosen assets.
    Fetch(RunArgs),
    /// Cut site-centered chips from downloaded scenes.
    Chip(RunArgs),
    /// Write single-image question/answer examples.
    Vqa(RunArgs),
    /// Write paired-observation examples.
    Pairs(RunArgs),
    /// Write dataset statistics and print the summary table.
    Stats(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Write a small offline workspace (annotations, catalog, scenes, config).
    MakeFixture { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted key=value override, e.g. `retry.retries=2`. Repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use a directory of STAC item files and local assets instead of the network.
    #[arg(long, value_name = "DIR")]
    offline: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<Config, hcforge::config::ConfigError> {
    match &args.config {
        Some(p) => load_config(p, &args.overrides),
        None => parse_config("", &args.overrides),
    }
}

fn run(stage: Option<Stage>, args: &RunArgs) -> i32 {
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return 2;
        }
    };
    let rt = match &args.offline {
        Some(dir) => match Runtime::offline(dir) {
            Ok(rt) => rt,
            Err(e) => {
                error!("{e}");
                return 2;
            }
        },
        None => Runtime::online(&cfg),
    };
    let result = Pipeline::new(cfg, rt).run(stage);
    match &result {
        Ok(reports) => {
            for r in reports {
                if let Some(text) = &r.stdout {
                    print!("{text}");
                }
            }
        }
        Err(e) => error!("{e}"),
    }
    exit_code(&result)
}

fn make_fixture(dir: &Path) -> anyhow::Result<()> {
    let s = build_fixture(dir).with_context(|| format!("writing fixture to {}", dir.display()))?;
    println!("config: {}", s.config.display());
    println!("catalog: {}", s.catalog.display());
    println!("sites: {}, items: {}", s.sites, s.items);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Ingest(a) => run(Some(Stage::Ingest), a),
        Command::Resolve(a) => run(Some(Stage::Resolve), a),
        Command::Fetch(a) => run(Some(Stage::Fetch), a),
        Command::Chip(a) => run(Some(Stage::Chip), a),
        Command::Vqa(a) => run(Some(Stage::Vqa), a),
        Command::Pairs(a) => run(Some(Stage::Pairs), a),
        Command::Stats(a) => run(Some(Stage::Stats), a),
        Command::All(a) => run(None, a),
        Command::MakeFixture { dir } => match make_fixture(dir) {
            Ok(()) => 0,
            Err(e) => {
                error!("{e:#}");
                2
            }
        },
    };
    ExitCode::from(code as u8)
}
