//! Experiment runner CLI. Exit codes: 0 converged, 2 iteration cap reached,
//! 1 usage or runtime error.

use std::io::Write as _;
use std::process::{Command, ExitCode, Stdio};

use clap::{Args, Parser, Subcommand, ValueEnum};

use itercomm_core::harness::{
    assemble_report, rank_routine, run_experiment, RankOutcome, RunConfig, RunReport,
};
use itercomm_core::solver::LocalDomain;
use itercomm_core::topology::build_partition;
use itercomm_core::transport::socket::{SocketConfig, SocketEndpoint};

#[derive(Parser)]
#[command(name = "itercomm", version, about = "Parallel iterative-method experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and emit the report.
    Run(RunArgs),
    /// Internal: one socket-backend worker process.
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// Threads over the deterministic simulated transport.
    Sim,
    /// OS processes over loopback TCP.
    Socket,
}

#[derive(Args)]
struct RunArgs {
    /// Config file in key=value format.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// Individual key=value overrides (repeatable); same keys as the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<std::path::PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long, value_enum, default_value = "sim")]
    backend: Backend,
    /// First TCP port for the socket backend (one port per rank).
    #[arg(long, default_value_t = 46500)]
    base_port: u16,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    base_port: u16,
    /// RunConfig as JSON.
    #[arg(long)]
    config: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Worker(args) => cmd_worker(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::parse_config(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for set in &args.sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got '{set}'"))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    cfg.validate()?;

    let report = match args.backend {
        Backend::Sim => run_experiment(&cfg)?,
        Backend::Socket => run_socket(&cfg, args.base_port)?,
    };

    let body = match args.format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
    };
    match &args.output {
        Some(path) => std::fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(if report.failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

/// Socket backend: spawn one OS process per rank and merge their outcomes.
fn run_socket(cfg: &RunConfig, base_port: u16) -> anyhow::Result<RunReport> {
    let exe = std::env::current_exe()?;
    let cfg_json = serde_json::to_string(cfg)?;
    let mut children = Vec::new();
    for rank in 0..cfg.p {
        let child = Command::new(&exe)
            .args([
                "worker",
                "--rank",
                &rank.to_string(),
                "--base-port",
                &base_port.to_string(),
                "--config",
                &cfg_json,
            ])
            .stdout(Stdio::piped())
            .spawn()?;
        children.push(child);
    }
    let mut outcomes = Vec::new();
    for (rank, child) in children.into_iter().enumerate() {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            anyhow::bail!("worker {rank} exited with {}", out.status);
        }
        let outcome: RankOutcome = serde_json::from_slice(&out.stdout)?;
        outcomes.push(outcome);
    }
    Ok(assemble_report(cfg, outcomes))
}

fn cmd_worker(args: WorkerArgs) -> anyhow::Result<ExitCode> {
    let cfg: RunConfig = serde_json::from_str(&args.config)?;
    let part = build_partition(cfg.n, cfg.n, cfg.n, cfg.p)?;
    let dom = LocalDomain::new(&part, args.rank);
    let peers: Vec<usize> = dom.neighbors.iter().map(|&(_, r)| r).collect();
    let socket_cfg = SocketConfig {
        base_port: args.base_port,
        slowdown: {
            let mut s = cfg.slowdown.clone();
            s.resize(cfg.p, 1.0);
            s
        },
        ..SocketConfig::default()
    };
    let ep = SocketEndpoint::open(args.rank, cfg.p, &peers, &peers, socket_cfg)?;
    let outcome = rank_routine(Box::new(ep), &cfg, args.rank)?;
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, &outcome)?;
    stdout.flush()?;
    Ok(ExitCode::SUCCESS)
}
