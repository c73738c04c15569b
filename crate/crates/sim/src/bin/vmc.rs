use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use vmc_sim::advisor::Advisor;
use vmc_sim::live::{run_real_time, LiveOptions, LiveRuntime, Sink};
use vmc_sim::net::{
    Aggregator, AggregatorConfig, CommandClient, CommandServer, Gateway, Publisher, RegistryServer, RegistrySource,
};
use vmc_sim::scenario::Mode;
use vmc_sim::telemetry::read_csv;
use vmc_sim::{run_fast_forward, RunOptions, Scenario, TelemetryRecord};

#[derive(Parser)]
#[command(name = "vmc", version, about = "Vascular morphogenesis controller simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds; overrides the scenario.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory for telemetry, registry, snapshots and report.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, conflicts_with = "real_time")]
    fast_forward: bool,
    #[arg(long)]
    real_time: bool,
    /// Simulated seconds per wall-clock second (real time only).
    #[arg(long)]
    time_scale: Option<f64>,
    /// Telemetry publish stream address (real time only).
    #[arg(long)]
    publish: Option<SocketAddr>,
    /// Command stream address (real time only).
    #[arg(long)]
    commands: Option<SocketAddr>,
    /// Registry HTTP endpoint address (real time only).
    #[arg(long)]
    registry_http: Option<SocketAddr>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file or a built-in scenario (`characterization`, `growth`).
    Run(RunArgs),
    /// Check a scenario without running it.
    Validate { scenario: String },
    /// Rank free leaves from a telemetry CSV.
    Advise {
        csv: PathBuf,
        #[arg(long, default_value_t = 20)]
        window: usize,
    },
    /// Re-emit a telemetry CSV as NDJSON on stdout or a publish stream.
    Replay {
        csv: PathBuf,
        #[arg(long)]
        publish: Option<SocketAddr>,
        /// Seconds to wait for a subscriber before publishing.
        #[arg(long, default_value_t = 0.0)]
        wait: f64,
    },
    /// Merge publish streams into one CSV with topology from a registry file.
    Aggregate {
        #[arg(long = "source", required = true)]
        sources: Vec<SocketAddr>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        cadence: f64,
        /// Serve the registry file read-only over HTTP.
        #[arg(long)]
        http: Option<SocketAddr>,
        /// Stop after this many seconds; runs until killed otherwise.
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Bridge a publish stream and a command stream to WebSocket clients.
    Gateway {
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        telemetry: SocketAddr,
        #[arg(long)]
        commands: Option<SocketAddr>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Send command lines from stdin to a command stream and print the acks.
    Send { addr: SocketAddr },
}

fn load(name: &str, seed: Option<u64>) -> Result<Scenario, String> {
    let s = Scenario::load(name).map_err(|e| e.to_string())?;
    Ok(match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn serve_for(seconds: Option<f64>) {
    match seconds {
        Some(s) => std::thread::sleep(Duration::from_secs_f64(s.max(0.0))),
        None => loop {
            std::thread::park();
        },
    }
}

fn run(args: RunArgs) -> Result<bool, String> {
    let RunArgs { scenario, seed, duration, out, fast_forward, real_time, time_scale, publish, commands, registry_http } =
        args;
    let mut s = load(&scenario, seed)?;
    if let Some(t) = time_scale {
        s.runtime.time_scale = t;
    }
    let live = real_time || (!fast_forward && s.runtime.mode == Mode::RealTime);
    let opts = RunOptions { out_dir: Some(out.clone()), snapshot_dir: None, duration };
    let output = if !live {
        if publish.is_some() || commands.is_some() || registry_http.is_some() {
            return Err("network interfaces need --real-time".into());
        }
        run_fast_forward(&s, &opts).map_err(|e| e.to_string())?
    } else if commands.is_none() && registry_http.is_none() {
        let publisher = publish.map(Publisher::bind).transpose().map_err(|e| e.to_string())?;
        let tap: Option<Sink> = publisher.map(|p| {
            let p = Arc::new(p);
            Arc::new(move |r: &TelemetryRecord| p.publish(r)) as Sink
        });
        run_real_time(&s, &opts, tap).map_err(|e| e.to_string())?
    } else {
        return run_interactive(s, duration, out, publish, commands, registry_http);
    };
    print!("{}", output.report.to_text());
    Ok(output.report.passed)
}

/// Real-time run with operator interfaces; telemetry goes to the CSV and the
/// publish stream, checks are not evaluated.
fn run_interactive(
    s: Scenario,
    duration: Option<f64>,
    out: PathBuf,
    publish: Option<SocketAddr>,
    commands: Option<SocketAddr>,
    registry_http: Option<SocketAddr>,
) -> Result<bool, String> {
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    let publisher = publish.map(Publisher::bind).transpose().map_err(|e| e.to_string())?.map(Arc::new);
    let log = Arc::new(std::sync::Mutex::new(
        vmc_sim::telemetry::CsvLog::open(&out.join("telemetry.csv")).map_err(|e| e.to_string())?,
    ));
    let sink: Sink = {
        let (publisher, log) = (publisher.clone(), log.clone());
        Arc::new(move |r: &TelemetryRecord| {
            if let Err(e) = log.lock().expect("csv").append(r) {
                log::error!("telemetry csv: {e}");
            }
            if let Some(p) = &publisher {
                p.publish(r);
            }
        })
    };
    let opts = LiveOptions { snapshot_dir: Some(out.join("snapshots")), registry_path: Some(out.join("registry.txt")) };
    let duration = duration.unwrap_or(s.runtime.duration);
    let rt = LiveRuntime::start(s, opts, sink).map_err(|e| e.to_string())?;
    let _commands = commands.map(|a| CommandServer::spawn(a, rt.handler())).transpose().map_err(|e| e.to_string())?;
    let _http = registry_http
        .map(|a| RegistryServer::spawn(a, RegistrySource::Shared(rt.registry())))
        .transpose()
        .map_err(|e| e.to_string())?;
    rt.wait_until(duration);
    rt.shutdown();
    log.lock().expect("csv").flush().map_err(|e| e.to_string())?;
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Cmd::Run(args) => run(args),
        Cmd::Validate { scenario } => load(&scenario, None).and_then(|s| {
            s.validate().map_err(|e| e.to_string())?;
            println!("{}: ok ({} modules, {} events, {} checks)", s.name, s.modules.len(), s.events.len(), s.checks.len());
            Ok(true)
        }),
        Cmd::Advise { csv, window } => read_csv(&csv).map_err(|e| e.to_string()).map(|records| {
            for e in Advisor::from_records(window, &records).advice() {
                println!("{} {:.1}%", e.leaf, e.share * 100.0);
            }
            true
        }),
        Cmd::Replay { csv, publish, wait } => replay(csv, publish, wait),
        Cmd::Aggregate { sources, out, registry, cadence, http, seconds } => (|| {
            let _http = match (&http, &registry) {
                (Some(a), Some(r)) => Some(RegistryServer::spawn(a, RegistrySource::File(r.clone())).map_err(|e| e.to_string())?),
                (Some(_), None) => return Err("--http needs --registry".to_string()),
                _ => None,
            };
            let mut config = AggregatorConfig::new(sources, out);
            config.registry = registry;
            config.cadence = Duration::from_secs_f64(cadence.max(0.01));
            let agg = Aggregator::spawn(config).map_err(|e| e.to_string())?;
            serve_for(seconds);
            agg.shutdown();
            Ok(true)
        })(),
        Cmd::Gateway { listen, telemetry, commands, seconds } => {
            Gateway::spawn(listen, telemetry, commands).map_err(|e| e.to_string()).map(|g| {
                serve_for(seconds);
                g.shutdown();
                true
            })
        }
        Cmd::Send { addr } => send(addr),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn replay(csv: PathBuf, publish: Option<SocketAddr>, wait: f64) -> Result<bool, String> {
    let records = read_csv(&csv).map_err(|e| e.to_string())?;
    match publish {
        None => {
            let mut out = io::stdout().lock();
            for r in &records {
                writeln!(out, "{}", r.to_json_line()).map_err(|e| e.to_string())?;
            }
        }
        Some(addr) => {
            let p = Publisher::bind(addr).map_err(|e| e.to_string())?;
            let deadline = std::time::Instant::now() + Duration::from_secs_f64(wait.max(0.0));
            while p.subscriber_count() == 0 && std::time::Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(20));
            }
            for r in &records {
                p.publish(r);
                while p.buffered() > 500 {
                    std::thread::sleep(Duration::from_millis(1));
                }
            }
            while p.buffered() > 0 && p.subscriber_count() > 0 {
                std::thread::sleep(Duration::from_millis(10));
            }
            p.shutdown();
        }
    }
    Ok(true)
}

fn send(addr: SocketAddr) -> Result<bool, String> {
    let mut client = CommandClient::connect(addr).map_err(|e| e.to_string())?;
    let mut all_ok = true;
    for line in io::stdin().lock().lines() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let ack = client.send_raw(line.trim()).map_err(|e| e.to_string())?;
        all_ok &= ack.ok;
        println!("{}", serde_json::to_string(&ack).expect("ack serializes"));
    }
    Ok(all_ok)
}
