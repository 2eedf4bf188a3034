use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::Context;
use clap::{Parser, Subcommand};
use duplex_core::media::DEFAULT_MAX_TILES;
use duplex_core::packer::DEFAULT_CONTEXT_CAP;
use duplex_gateway::commands::{self, TokenizeRequest};
use duplex_gateway::Server;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "duplex", version, about = "Duplex voice-interaction engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the streaming service.
    Serve {
        #[arg(long, env = "DUPLEX_CONFIG")]
        config: Option<PathBuf>,
        /// Overrides the port of `gateway.bind`.
        #[arg(long, env = "DUPLEX_PORT")]
        port: Option<u16>,
    },
    /// Run a scenario file offline and print its report.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Write the JSON-lines trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        virtual_clock: bool,
        #[arg(long, env = "DUPLEX_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Pack a JSON-lines sample manifest into context-sized bins.
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CONTEXT_CAP)]
        cap: u64,
    },
    /// Sample a length-matched noise corpus from answer sentences.
    SampleNoise {
        /// Candidate sentences, one per line.
        #[arg(long)]
        answers: PathBuf,
        /// Positive questions, one per line; only their lengths are used.
        #[arg(long)]
        positives: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Token budget of a media item.
    Tokenize {
        #[command(subcommand)]
        media: Media,
    },
}

#[derive(Subcommand)]
enum Media {
    Audio {
        #[arg(long)]
        duration: f64,
    },
    Video {
        #[arg(long)]
        duration: f64,
    },
    Image {
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        #[arg(long, default_value_t = DEFAULT_MAX_TILES)]
        max_tiles: u32,
    },
    /// Log-mel features of raw 16-bit mono PCM.
    Mel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
    },
}

fn output(path: Option<PathBuf>) -> anyhow::Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(&p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Serve { config, port } => {
            let mut config = commands::load_config(config.as_deref())?;
            if let Some(port) = port {
                let host = config
                    .gateway
                    .bind
                    .rsplit_once(':')
                    .map_or("127.0.0.1", |(h, _)| h)
                    .to_string();
                config.gateway.bind = format!("{host}:{port}");
            }
            let server = Server::bind(config)?;
            let shutdown = server.shutdown_handle();
            ctrlc::set_handler(move || {
                tracing::info!("shutdown requested");
                shutdown.store(true, Ordering::SeqCst);
            })?;
            server.run()?;
        }
        Command::Simulate {
            scenario,
            trace,
            virtual_clock,
            config,
        } => {
            let config = commands::load_config(config.as_deref())?;
            let report = commands::simulate(&scenario, &config, trace, virtual_clock)?;
            emit(&serde_json::to_string_pretty(&report)?)?;
            if !report.passed() {
                for failure in &report.failures {
                    eprintln!("expectation failed: {failure}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Pack {
            input,
            output: out,
            cap,
        } => {
            let mut out = output(out)?;
            let bins = commands::pack_manifest(&input, cap, &mut out)?;
            out.flush()?;
            tracing::info!(bins, "packed");
        }
        Command::SampleNoise {
            answers,
            positives,
            k,
            seed,
            output: out,
        } => {
            let mut out = output(out)?;
            commands::sample_noise(&answers, &positives, k, seed, &mut out)?;
            out.flush()?;
        }
        Command::Tokenize { media } => {
            let request = match media {
                Media::Audio { duration } => TokenizeRequest::Audio { duration },
                Media::Video { duration } => TokenizeRequest::Video { duration },
                Media::Image {
                    width,
                    height,
                    max_tiles,
                } => TokenizeRequest::Image {
                    width,
                    height,
                    max_tiles,
                },
                Media::Mel { input, sample_rate } => TokenizeRequest::Mel { input, sample_rate },
            };
            emit(&commands::tokenize(&request)?.to_string())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
