use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mlckpt_backend::{backend_main, BackendOptions};
use mlckpt_cli::bench::{bench, BenchSpec};
use mlckpt_cli::catalog::{inspect, recover};
use mlckpt_cli::run::{run, run_rank};
use mlckpt_cli::{io_error, load_config, simulate, CliError};

/// Multi-level checkpoint/restart runtime.
#[derive(Parser)]
#[command(name = "mlckpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the active backend until SHUTDOWN.
    Backend {
        #[arg(long)]
        config: PathBuf,
        /// Seconds a barrier waits for missing ranks.
        #[arg(long, default_value_t = 30)]
        barrier_timeout: u64,
    },
    /// Execute a scenario with one process per rank.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Print the version catalog and the latest restorable version.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        name: String,
        /// Group size; inferred from manifests when omitted.
        #[arg(long)]
        ranks: Option<u32>,
    },
    /// Materialize every rank of one version on scratch.
    Recover {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        version: u32,
        #[arg(long)]
        ranks: Option<u32>,
    },
    /// Grid search for the checkpoint interval; CSV on stdout.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// checkpoint() blocking time, SYNC vs ASYNC, under repository latency.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        size: u64,
        #[arg(long)]
        reps: u32,
        #[arg(long, value_delimiter = ',', default_value = "0,2000,5000")]
        latency_ms: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        ranks: u32,
    },
    #[command(hide = true)]
    Rank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        phase: usize,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Cmd::Backend { config, barrier_timeout } => {
            let config = load_config(&config)?;
            let opts = BackendOptions {
                barrier_timeout: std::time::Duration::from_secs(barrier_timeout),
                ..BackendOptions::default()
            };
            backend_main(&config, opts)?;
            Ok(())
        }
        Cmd::Run { config, scenario } => run(&config, &scenario, &mut out),
        Cmd::Inspect { config, name, ranks } => inspect(&load_config(&config)?, &name, ranks, &mut out),
        Cmd::Recover { config, name, version, ranks } => recover(&load_config(&config)?, &name, version, ranks, &mut out),
        Cmd::Simulate { scenario, out: csv_path } => {
            let text = std::fs::read_to_string(&scenario).map_err(|e| io_error(&scenario.display().to_string(), e))?;
            let (csv, optimum) = simulate(&text)?;
            out.write_all(csv.as_bytes()).map_err(|e| io_error("stdout", e))?;
            if let Some(p) = csv_path {
                std::fs::write(&p, &csv).map_err(|e| io_error(&p.display().to_string(), e))?;
            }
            eprintln!(
                "OPTIMUM interval={} mean_eff={:.6} simulator_calls={}",
                optimum.interval, optimum.mean, optimum.simulator_calls
            );
            Ok(())
        }
        Cmd::Bench { config, size, reps, latency_ms, ranks } => {
            let spec = BenchSpec { size, reps, latencies_ms: latency_ms, ranks };
            bench(&load_config(&config)?, &spec, &mut out)
        }
        Cmd::Rank { config, scenario, rank, phase } => run_rank(&config, &scenario, rank, phase, &mut out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return;
        }
        Err(e) => {
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            std::process::exit(2);
        }
    };
    if let Err(e) = dispatch(cli.command) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
