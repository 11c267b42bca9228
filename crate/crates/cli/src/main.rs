use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use codesign_cli::report::{load, summarize, ProjectReport};
use codesign_cli::sim::{simulate, SimConfig};
use codesign_core::preference::Strategy;
use codesign_core::AttributeId;
use codesign_gateway::{BackendMode, Gateway, GatewayConfig, WriteOptions};

#[derive(Parser)]
#[command(name = "codesign", version, about = "Simulate, replay and report on co-design projects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Entropy,
    Random,
    Both,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run synthetic users through the in-process gateway and write metrics CSVs.
    Simulate {
        #[arg(long, default_value_t = 3)]
        users: usize,
        /// Items available for recommendation.
        #[arg(long, default_value_t = 200)]
        catalog: usize,
        /// Evaluation items kept out of the library.
        #[arg(long, default_value_t = 200)]
        holdout: usize,
        #[arg(long, default_value_t = 6)]
        rounds: usize,
        /// Number of seeds, starting at --seed-base.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, value_enum, default_value_t = StrategyArg::Both)]
        strategy: StrategyArg,
        /// Label flip probability in [0, 0.5).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Skip informed generation at the end of each run.
        #[arg(long)]
        no_informed: bool,
        /// Output directory for rounds.csv, consensus.csv and paired.csv.
        #[arg(long, short, default_value = "sim-out")]
        out: PathBuf,
    },
    /// Replay an events.jsonl file and print its summary and state hash.
    Replay { log: PathBuf },
    /// Consensus and attribution tables for a project log.
    Report {
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Directory for CSV tables; JSON goes to stdout.
        #[arg(long, short, default_value = "report")]
        out: PathBuf,
    },
    /// Export a fine-tuning manifest for one attribute of a stored project.
    ExportManifest {
        #[arg(long, env = "CODESIGN_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long)]
        project: String,
        /// `d.a` indices or `Dimension:Attribute`.
        #[arg(long)]
        attribute: String,
    },
    /// Run the HTTP gateway.
    Serve {
        #[arg(long, env = "CODESIGN_DATA_DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, env = "CODESIGN_LISTEN", default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, env = "CODESIGN_BACKEND", default_value = "mock")]
        backend: String,
        #[arg(long, env = "CODESIGN_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "CODESIGN_MAX_ROUNDS", default_value_t = 6)]
        max_rounds: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { users, catalog, holdout, rounds, seeds, seed_base, strategy, noise, no_informed, out } => {
            let strategies = match strategy {
                StrategyArg::Entropy => vec![Strategy::Entropy],
                StrategyArg::Random => vec![Strategy::Random],
                StrategyArg::Both => vec![Strategy::Entropy, Strategy::Random],
            };
            let cfg = SimConfig {
                users,
                catalog,
                holdout,
                rounds,
                seeds: (seed_base..seed_base + seeds).collect(),
                strategies,
                noise,
                informed: !no_informed,
                ..SimConfig::default()
            };
            let report = simulate(&cfg)?;
            report.write(&out)?;
            print!("{}", report.summary());
            println!("wrote {}", out.display());
        }
        Command::Replay { log } => {
            let state = load(&log)?;
            println!("{}", serde_json::to_string_pretty(&summarize(&state))?);
        }
        Command::Report { log, format, out } => {
            let report = ProjectReport::build(&load(&log)?)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                Format::Csv => {
                    report.write_csv(&out)?;
                    println!("wrote {}", out.display());
                }
            }
        }
        Command::ExportManifest { data_dir, project, attribute } => {
            let attr: AttributeId = attribute.parse()?;
            let gw = Gateway::open(GatewayConfig { data_dir: Some(data_dir), ..GatewayConfig::default() })?;
            let m = gw.export_manifest(&project, attr, &WriteOptions::default())?;
            println!("{}", serde_json::to_string_pretty(&m.manifest)?);
            if let Some(dir) = m.written_to {
                eprintln!("wrote {}", dir.display());
            }
        }
        Command::Serve { data_dir, listen, backend, seed, max_rounds } => {
            tracing_subscriber::fmt()
                .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
                .init();
            let backend: BackendMode = backend.parse()?;
            let cfg = GatewayConfig { data_dir, listen: listen.clone(), backend, seed, max_rounds };
            let gw = Arc::new(Gateway::open(cfg)?);
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(codesign_gateway::http::serve(gw, &listen))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
