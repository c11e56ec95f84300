use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use twinforge::bench::{self, BenchKind};
use twinforge::config::Config;
use twinforge::ctl::{self, CtlArgs};
use twinforge::{example, server};

#[derive(Debug, Parser)]
#[command(name = "twinforge", version, about = "Digital twin platform")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every service and the HTTP API in this process.
    Serve {
        /// JSON config file; `${VAR}` and `${VAR:-default}` are expanded.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data_dir` from the config.
        #[arg(long, env = "TWINFORGE_DATA_DIR")]
        data_dir: Option<PathBuf>,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Talk to a running server.
    Ctl(CtlArgs),
    /// Run a benchmark scenario against in-process platforms.
    Bench {
        kind: BenchKind,
        /// Scenario JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a bundled config.
    Example {
        #[arg(value_parser = example::NAMES)]
        name: String,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("TWINFORGE_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Serve { config, data_dir, listen } => {
            let cfg = match &config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let running = server::prepare(&cfg, data_dir, listen).await?;
                eprintln!("listening on http://{}", running.http_addr);
                running.serve(server::shutdown_signal()).await
            })?;
        }
        Command::Ctl(args) => ctl::run(&args)?,
        Command::Bench { kind, config, out } => {
            let cfg = bench::load_scenario(config.as_deref())?;
            let report = bench::run(kind, &cfg)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(&p, json + "\n")?,
                None => println!("{json}"),
            }
            eprint!("{}", bench::summary(&report));
        }
        Command::Example { name } => {
            let v = example::by_name(&name).expect("clap checked the name");
            print!("{}", example::render(&v));
        }
    }
    Ok(())
}
