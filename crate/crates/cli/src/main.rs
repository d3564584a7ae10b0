use std::io::IsTerminal;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use tracing::{error, info};
use tracing_subscriber::EnvFilter;
use wotgw_cli::plot::latency_svg;
use wotgw_cli::{compare_reports, run_bench, BenchReport, BenchScenario, CliError};
use wotgw_core::codec::MappingDictionary;
use wotgw_core::gateway::{GatewayServer, ResolvedConfig};
use wotgw_core::sim::{self, SimConfig};
use wotgw_core::socks::Family;

#[derive(Parser)]
#[command(
    name = "wotgw",
    version,
    about = "Web-of-Things gateway, device simulator and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway until interrupted.
    Gateway {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a simulated power-sensor device until interrupted.
    Sim(SimArgs),
    /// Run a benchmark scenario and write its report.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a latency histogram as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Print per-metric deltas of report B against report A.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(clap::Args)]
struct SimArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: SocketAddr,
    /// JSON array of long-key readings; defaults to the two-device example.
    #[arg(long)]
    readings: Option<PathBuf>,
    /// Mapping dictionary file; defaults to the power-sensor dictionary.
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    #[arg(long, default_value_t = 0.0)]
    failure_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    power_save_idle_s: f64,
    #[arg(long, default_value_t = 100)]
    wake_latency_ms: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            error!("cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    let result = runtime.block_on(async {
        match cli.command {
            Command::Gateway { config } => gateway(config).await,
            Command::Sim(args) => simulator(args).await,
            Command::Bench { scenario, out, plot } => bench(scenario, out, plot).await,
            Command::Compare { a, b } => compare(a, b),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("wotgw: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

async fn interrupted() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        error!("cannot wait for interrupt: {e}");
        std::future::pending::<()>().await;
    }
}

fn show(addr: Option<SocketAddr>) -> String {
    addr.map_or_else(|| "-".into(), |a| a.to_string())
}

async fn gateway(path: PathBuf) -> Result<(), CliError> {
    let config = ResolvedConfig::load(&path).map_err(|e| CliError::Config(e.to_string()))?;
    let devices = config.devices.len();
    let mut server = GatewayServer::start(config)
        .await
        .map_err(|e| CliError::Config(e.to_string()))?;
    info!(
        v4 = %show(server.local_addr(Family::V4)),
        v6 = %show(server.local_addr(Family::V6)),
        relay_v4 = %show(server.relay_addr(Family::V4)),
        relay_v6 = %show(server.relay_addr(Family::V6)),
        devices,
        "gateway ready"
    );
    interrupted().await;
    info!("shutting down");
    server.stop();
    Ok(())
}

async fn simulator(args: SimArgs) -> Result<(), CliError> {
    let config_err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
    if !(0.0..=1.0).contains(&args.failure_rate) {
        return Err(CliError::Config(format!(
            "--failure-rate must be within [0, 1], got {}",
            args.failure_rate
        )));
    }
    if !(args.power_save_idle_s.is_finite() && args.power_save_idle_s >= 0.0) {
        return Err(CliError::Config("--power-save-idle-s must be non-negative".into()));
    }
    let readings = match &args.readings {
        Some(p) => sim::load_readings(p).map_err(|e| config_err(&e))?,
        None => sim::default_readings(),
    };
    let mapping = match &args.mapping {
        Some(p) => MappingDictionary::load(p).map_err(|e| config_err(&e))?,
        None => MappingDictionary::power_sensor(),
    };
    let handle = sim::serve(SimConfig {
        bind: args.bind,
        readings,
        mapping,
        base_latency: Duration::from_millis(args.latency_ms),
        failure_rate: args.failure_rate,
        seed: args.seed,
        power_save_idle: Duration::from_secs_f64(args.power_save_idle_s),
        wake_latency: Duration::from_millis(args.wake_latency_ms),
    })
    .await
    .map_err(|e| CliError::Config(format!("cannot listen on {}: {e}", args.bind)))?;
    info!(addr = %handle.local_addr(), "simulator ready");
    interrupted().await;
    info!(
        requests = handle.request_count(),
        failures = handle.failure_count(),
        "simulator stopping"
    );
    handle.stop().await;
    Ok(())
}

async fn bench(scenario: PathBuf, out: PathBuf, plot: Option<PathBuf>) -> Result<(), CliError> {
    let scenario = BenchScenario::load(&scenario)?;
    info!(scenario = %scenario.name, requests = scenario.total_requests(), "running benchmark");
    let outcome = run_bench(&scenario).await?;
    let json = outcome.report.to_json();
    std::fs::write(&out, format!("{json}\n"))
        .map_err(|e| CliError::Runtime(format!("writing report {}: {e}", out.display())))?;
    if let Some(plot) = plot {
        let svg = latency_svg(&scenario.name, &outcome.latencies_ms, 40);
        std::fs::write(&plot, svg).map_err(|e| CliError::Runtime(format!("writing plot {}: {e}", plot.display())))?;
    }
    println!("{json}");
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf) -> Result<(), CliError> {
    let a = BenchReport::load(a)?;
    let b = BenchReport::load(b)?;
    print!("{}", compare_reports(&a, &b)?.table());
    Ok(())
}
