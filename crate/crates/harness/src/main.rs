use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use mip::clock::SystemClock;
use mip::connectivity::MachineConfig;
use mip::platform::{Platform, PlatformConfig};
use mip::services::Directory;
use mip_harness::gateway::{self, GatewayState};
use mip_harness::{run_scenario, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "mip", about = "Run scripted scenarios or serve the platform gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a scenario file and print its transcript.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ack_drop: Option<f64>,
        /// 1-based step before which a core consumer is removed.
        #[arg(long)]
        kill_consumer: Option<usize>,
        /// 1-based step before which a data node is killed.
        #[arg(long)]
        kill_datanode: Option<usize>,
        /// Write the transcript here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Omit latencies and metrics.
        #[arg(long)]
        canonical: bool,
    },
    /// Boot the platform and expose the WebSocket/HTTP gateway.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        machine: Option<PathBuf>,
        #[arg(long)]
        directory: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            ack_drop,
            kill_consumer,
            kill_datanode,
            out,
            canonical,
        } => run(scenario, RunOptions {
            seed,
            ack_drop,
            kill_consumer_at: kill_consumer,
            kill_datanode_at: kill_datanode,
            ..RunOptions::default()
        }, out, canonical),
        Command::Serve {
            bind,
            machine,
            directory,
        } => serve(bind, machine, directory),
    }
}

fn run(path: PathBuf, options: RunOptions, out: Option<PathBuf>, canonical: bool) -> ExitCode {
    let result = Scenario::load(&path).and_then(|s| run_scenario(&s, &options));
    let transcript = match result {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let json = if canonical { transcript.canonical() } else { transcript.clone() }.to_json_pretty();
    match out {
        Some(p) => {
            if let Err(e) = std::fs::write(&p, json + "\n") {
                eprintln!("error: {}: {e}", p.display());
                return ExitCode::from(2);
            }
        }
        None => println!("{json}"),
    }
    for s in &transcript.steps {
        let mark = if s.passed() { "ok" } else { "MISMATCH" };
        eprintln!("step {:>2} [{mark}] {} -> {}", s.step, s.intent, s.reply);
    }
    let c = transcript.conservation;
    eprintln!("turns {} journal {} replies {}", c.turns, c.journal_lines, c.replies);
    if transcript.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn serve(bind: SocketAddr, machine: Option<PathBuf>, directory: Option<PathBuf>) -> ExitCode {
    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    let mut config = PlatformConfig::default();
    if let Some(p) = &machine {
        match read(p).and_then(|j| MachineConfig::from_json(&j).map_err(|e| e.to_string())) {
            Ok(m) => config.machines = vec![m],
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    if let Some(p) = &directory {
        match read(p).and_then(|j| Directory::from_json(&j).map_err(|e| e.to_string())) {
            Ok(d) => config.directory = d,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let platform = match Platform::start(config, SystemClock::shared()) {
        Ok(p) => Arc::new(p),
        Err(e) => {
            eprintln!("error: boot failed: {e}");
            return ExitCode::from(2);
        }
    };
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let state = Arc::new(GatewayState::new(platform.clone()));
    let outcome = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        tokio::select! {
            r = gateway::serve(listener, state) => r,
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    });
    platform.shutdown();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
