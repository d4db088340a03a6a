use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use onebyte_node::{metrics, session_for, Node, NodeHooks, Outcome, RunConfig, TcpTransport};
use tracing::Level;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Runs one training peer over TCP.
#[derive(Debug, Parser)]
#[command(name = "onebyte-node", version)]
struct Args {
    /// Address to listen on, e.g. 127.0.0.1:7000.
    #[arg(long)]
    listen: String,
    /// Comma-separated addresses of running peers; omit to found a network.
    #[arg(long, value_delimiter = ',')]
    bootstrap: Vec<String>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<u64>,
    /// Send one-byte gradients (on) or raw f32 (off).
    #[arg(long)]
    quantized: Option<Switch>,
    /// Every peer draws batches from the same data shard.
    #[arg(long)]
    identical_data: bool,
    /// Machine time used in seeds and ordering; defaults to microseconds since the epoch.
    #[arg(long)]
    machine_time: Option<u64>,
    /// Where to write per-iteration metrics as CSV.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn run(args: Args) -> Result<Outcome, String> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(m) = args.max_iter {
        cfg.max_iter = m;
    }
    if let Some(q) = args.quantized {
        cfg.quantized = matches!(q, Switch::On);
    }
    cfg.identical_data |= args.identical_data;
    cfg.validate().map_err(|e| e.to_string())?;

    let machine_time = args.machine_time.unwrap_or_else(|| {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(1, |d| d.as_micros() as u64)
    });
    let session = session_for(&cfg, machine_time, &args.listen).map_err(|e| e.to_string())?;
    let transport = TcpTransport::bind(&args.listen, session).map_err(|e| e.to_string())?;
    tracing::info!(address = %onebyte_node::Transport::address(&transport), machine_time, "listening");
    let node = Node::new(cfg, machine_time, Box::new(transport), args.bootstrap, NodeHooks::default())
        .map_err(|e| e.to_string())?;
    let report = node.run();
    for e in &report.events {
        tracing::info!("{e}");
    }
    if let Some(path) = &args.metrics_out {
        let file = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        metrics::write_csv(&report.metrics, file).map_err(|e| e.to_string())?;
    }
    println!(
        "{} iter={} digest={} peers={}",
        match &report.outcome {
            Outcome::Finished => "finished".to_string(),
            Outcome::Crashed => "crashed".to_string(),
            Outcome::Failed(r) => format!("failed: {r}"),
        },
        report.cur_iter,
        onebyte_core::params::digest_hex(&report.digest),
        report.live_peers.len()
    );
    Ok(report.outcome)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_max_level(
            std::env::var("ONEBYTE_LOG")
                .ok()
                .and_then(|v| v.parse::<Level>().ok())
                .unwrap_or(Level::WARN),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Args::parse()) {
        Ok(Outcome::Finished) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
