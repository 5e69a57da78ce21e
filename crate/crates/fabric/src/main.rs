use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use qfabric::config::{self, BUNDLED};
use qfabric::control::{Backoff, SwitchAgent};
use qfabric::ledger::write_ledger;
use qfabric::node::{self, NodeConfig};
use qfabric_core::net::NodeId;
use qfabric_core::scenario::ReportFormat;

#[derive(Parser)]
#[command(name = "qfabric", version, about = "Software-defined network with quantum and classical encoding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file (or a bundled scenario by name) and report.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Carry data frames over loopback TCP sockets.
        #[arg(long)]
        live: bool,
        /// Write the key consumption ledger here.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Serve the REST API and switch control ports for a scenario's network.
    Serve {
        scenario: String,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Node n's switch connects on this port plus n.
        #[arg(long, default_value_t = 6650)]
        control_port: u16,
        #[arg(long, env = "QFABRIC_TOKEN")]
        token: Option<String>,
    },
    /// Run one switch that connects to a controller's control port.
    Switch {
        #[arg(long)]
        node: u16,
        #[arg(long)]
        controller: SocketAddr,
        #[arg(long, default_value_t = 5000)]
        max_backoff_ms: u64,
    },
    /// List the bundled scenarios.
    List,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Run { scenario, seed, format, live, ledger } => {
            let mut sc = match config::resolve(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let report = match qfabric::run(&sc, live) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            print!("{}", report.render(format));
            if let Some(path) = ledger {
                let written = File::create(&path).and_then(|f| write_ledger(&report.ledger, BufWriter::new(f)));
                if let Err(e) = written {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Cmd::Serve { scenario, listen, control_port, token } => {
            let sc = match config::resolve(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let cfg = NodeConfig { http: listen, control_base_port: control_port, token, ..NodeConfig::default() };
            runtime().block_on(async move {
                match node::start(&sc, cfg).await {
                    Ok(n) => {
                        eprintln!("api on http://{}", n.http);
                        for (id, addr) in &n.control {
                            eprintln!("switch {id} control on {addr}");
                        }
                        n.wait().await;
                        ExitCode::SUCCESS
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        ExitCode::from(2)
                    }
                }
            })
        }
        Cmd::Switch { node, controller, max_backoff_ms } => {
            let backoff = Backoff { max: Duration::from_millis(max_backoff_ms), ..Backoff::default() };
            runtime().block_on(async move {
                let (_, task) = SwitchAgent { node: NodeId(node), controller, backoff }.spawn();
                let _ = task.await;
                ExitCode::SUCCESS
            })
        }
        Cmd::List => {
            for name in BUNDLED {
                match config::bundled(name) {
                    Ok(s) => println!("{name:<14} {}", s.description),
                    Err(e) => println!("{name:<14} ({e})"),
                }
            }
            ExitCode::SUCCESS
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime")
}
