use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use onebyte_core::params::digest_hex;
use onebyte_core::privacy::{entropy_drop, mc_entropy_drop, MIN_MC_SAMPLES};
use onebyte_core::rng::{check_golden, golden_entries, parse_golden, render_golden};
use onebyte_harness::baselines::{reference_models, render_table, Scheme};
use onebyte_harness::privacy_cli::{parse_direction, parse_prior};
use onebyte_harness::{emit_report, run_cluster, sequential_oracle, ClusterSpec, Fault, TransportKind};
use onebyte_node::RunConfig;
use tracing::Level;

const GOLDEN: &str = include_str!("../../../core/tests/data/golden_normals.txt");

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Net {
    Loopback,
    Tcp,
}

#[derive(Debug, Parser)]
#[command(name = "onebyte-harness", version, about = "Simulate clusters, print baselines, check conformance")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a cluster on this machine.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        nodes: usize,
        /// crash:<node>@<iter>, stall:<node>@<iter>:<ms>, corrupt:<node>@<iter>, join:<node>@<iter>; repeatable.
        #[arg(long = "fault")]
        faults: Vec<Fault>,
        #[arg(long, value_enum, default_value = "loopback")]
        transport: Net,
        #[arg(long)]
        max_iter: Option<u64>,
        #[arg(long)]
        quantized: Option<Switch>,
        #[arg(long)]
        identical_data: bool,
        /// Joiners wait this many network iterations after downloading weights.
        #[arg(long, default_value_t = 0)]
        download_lag: u64,
        /// Compare the final weights with the single-process oracle (fault-free runs only).
        #[arg(long)]
        oracle: bool,
        /// Directory for per-node CSV files and summary.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the communication cost comparison.
    Baselines {
        #[arg(long)]
        machines: Option<u64>,
        /// Per-machine backpropagation steps for the gradient-based schemes.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        params: Option<u64>,
    },
    /// Check (or write) the seeded-normal golden vectors.
    Conformance {
        /// Golden file to check instead of the built-in copy.
        #[arg(long)]
        golden: Option<PathBuf>,
        /// Write freshly generated vectors here instead of checking.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Entropy drop from observing one projected gradient under a Gaussian prior.
    Privacy {
        #[arg(long)]
        k: usize,
        /// identity, diag:a,b,... or a file holding a k×k matrix.
        #[arg(long, default_value = "identity")]
        cov: String,
        /// e<i>, uniform or random[:seed].
        #[arg(long, default_value = "e1")]
        direction: String,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn simulate(cmd: Cmd) -> Result<bool, String> {
    let Cmd::Simulate {
        config,
        nodes,
        faults,
        transport,
        max_iter,
        quantized,
        identical_data,
        download_lag,
        oracle,
        out,
    } = cmd
    else {
        unreachable!()
    };
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(m) = max_iter {
        cfg.max_iter = m;
    }
    if let Some(q) = quantized {
        cfg.quantized = matches!(q, Switch::On);
    }
    cfg.identical_data |= identical_data;
    let mut spec = ClusterSpec::new(cfg.clone(), nodes);
    spec.faults = faults;
    spec.download_lag = download_lag;
    spec.transport = match transport {
        Net::Loopback => TransportKind::Loopback,
        Net::Tcp => TransportKind::Tcp,
    };
    let report = run_cluster(&spec).map_err(|e| e.to_string())?;
    print!("{}", onebyte_harness::report::summary(&report));
    let mut ok = report.failed.is_none() && report.replicas_agree();
    if oracle {
        if !spec.faults.is_empty() {
            return Err("--oracle needs a fault-free run".into());
        }
        let want = sequential_oracle(&cfg, &report.keys())?;
        let matches = report.finished().all(|n| n.report.theta.bit_eq(&want));
        println!("oracle digest={} matches={matches}", digest_hex(&want.digest(cfg.max_iter)));
        ok &= matches;
    }
    if let Some(dir) = out {
        for p in emit_report(&report, &dir).map_err(|e| e.to_string())? {
            println!("wrote {}", p.display());
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.cmd {
        cmd @ Cmd::Simulate { .. } => simulate(cmd),
        Cmd::Baselines { machines, steps, params } => {
            let mut models = reference_models();
            for m in &mut models {
                if let Some(x) = machines {
                    m.machines = x;
                }
                if let Some(x) = params {
                    m.params = x;
                }
                if let (Some(x), false) = (steps, matches!(m.scheme, Scheme::OneByte { .. })) {
                    m.steps = x;
                }
            }
            print!("{}", render_table(&models));
            println!("assumptions: 6.7e9 parameters at 2 bytes, 4 machines, 6,400 backpropagation gradients in total");
            println!("(1,600 per machine); averaging rounds every 64 gradients (16 per machine); adapter rank 8 on two");
            println!("4096x4096 projections in each of 32 layers; one-byte run of 16,000 steps of 16 projected gradients.");
            Ok(true)
        }
        Cmd::Conformance { golden, write } => {
            if let Some(path) = write {
                std::fs::write(&path, render_golden(&golden_entries(10))).map_err(|e| format!("{}: {e}", path.display()))?;
                println!("wrote {}", path.display());
                return Ok(true);
            }
            let text = match golden {
                Some(p) => std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?,
                None => GOLDEN.to_string(),
            };
            let entries = parse_golden(&text).map_err(|e| e.to_string())?;
            let bad = check_golden(&entries);
            for (e, got) in &bad {
                println!("MISMATCH seed={:#018x} index={} want={:#018x} got={got:#018x}", e.seed, e.index, e.bits);
            }
            println!(
                "{} entries, {} mismatches on {}-{}",
                entries.len(),
                bad.len(),
                std::env::consts::ARCH,
                std::env::consts::OS
            );
            Ok(bad.is_empty() && !entries.is_empty())
        }
        Cmd::Privacy {
            k,
            cov,
            direction,
            samples,
            seed,
        } => {
            let prior = parse_prior(&cov, k)?;
            let v = parse_direction(&direction, k)?;
            let exact = entropy_drop(&prior, &v).map_err(|e| e.to_string())?;
            println!("closed form  {exact:.6} nats");
            if samples >= MIN_MC_SAMPLES {
                let mc = mc_entropy_drop(&prior, &v, samples, seed).map_err(|e| e.to_string())?;
                println!("monte carlo  {mc:.6} nats ({samples} samples, diff {:+.4})", mc - exact);
            }
            Ok(true)
        }
    }
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
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
